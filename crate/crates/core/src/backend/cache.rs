use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::{BackendError, Role, Transport};
use crate::hash::canonical_json_hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    /// Serve hits from disk; forward misses upstream and store the reply.
    ReadWrite,
    /// Serve hits from disk; a miss is an error.
    ReplayOnly,
}

/// Content-addressed record/replay cache in front of another transport.
///
/// Layout: `<dir>/<role>/<sha256 of {role, body}>.json`. Writes go through a
/// temp file in the same directory and are renamed into place.
pub struct ReplayCache<T> {
    inner: T,
    dir: PathBuf,
    mode: CacheMode,
}

impl<T: Transport> ReplayCache<T> {
    pub fn new(inner: T, dir: impl Into<PathBuf>, mode: CacheMode) -> Result<Self, BackendError> {
        let dir = dir.into();
        for role in Role::ALL {
            std::fs::create_dir_all(dir.join(role.as_str()))
                .map_err(|e| BackendError::Cache(format!("{}: {e}", dir.display())))?;
        }
        Ok(Self { inner, dir, mode })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(role: Role, body: &Value) -> String {
        canonical_json_hash(&json!({ "role": role.as_str(), "body": body }))
    }

    pub fn entry_path(&self, role: Role, body: &Value) -> PathBuf {
        self.dir.join(role.as_str()).join(format!("{}.json", Self::key(role, body)))
    }

    fn store(&self, path: &Path, reply: &Value) -> Result<(), BackendError> {
        let parent = path.parent().expect("cache entries live in a role directory");
        let cache_err = |e: std::io::Error| BackendError::Cache(format!("{}: {e}", path.display()));
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(cache_err)?;
        tmp.write_all(reply.to_string().as_bytes()).map_err(cache_err)?;
        tmp.persist(path).map_err(|e| cache_err(e.error))?;
        Ok(())
    }
}

impl<T: Transport> Transport for ReplayCache<T> {
    fn post(&self, role: Role, body: &Value) -> Result<Value, BackendError> {
        let path = self.entry_path(role, body);
        match std::fs::read(&path) {
            Ok(bytes) => {
                return serde_json::from_slice(&bytes)
                    .map_err(|e| BackendError::Cache(format!("corrupt entry {}: {e}", path.display())));
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(BackendError::Cache(format!("{}: {e}", path.display()))),
        }
        if self.mode == CacheMode::ReplayOnly {
            return Err(BackendError::Cache(format!("no recorded {role} response for key {}", Self::key(role, body))));
        }
        let reply = self.inner.post(role, body)?;
        self.store(&path, &reply)?;
        Ok(reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendClient, CountingTransport, MockConfig, MockTransport};
    use std::sync::Arc;

    #[test]
    fn second_identical_request_is_served_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let counting = Arc::new(CountingTransport::new(MockTransport::new(MockConfig::default())));
        let cache = ReplayCache::new(counting.clone(), dir.path(), CacheMode::ReadWrite).unwrap();
        let client = BackendClient::new(Arc::new(cache));
        let a = client.complete("hello there", 7, 0.7).unwrap();
        let b = client.complete("hello there", 7, 0.7).unwrap();
        assert_eq!(a, b);
        assert_eq!(counting.calls(Role::Llm), 1);
        client.complete("hello there", 8, 0.7).unwrap();
        assert_eq!(counting.calls(Role::Llm), 2);
    }

    #[test]
    fn replay_only_miss_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache =
            ReplayCache::new(MockTransport::new(MockConfig::default()), dir.path(), CacheMode::ReplayOnly).unwrap();
        let err = cache.post(Role::Llm, &json!({"prompt": "x"})).unwrap_err();
        assert!(matches!(err, BackendError::Cache(_)));
    }

    #[test]
    fn key_ignores_object_key_order() {
        let a: Value = serde_json::from_str(r#"{"seed": 1, "prompt": "p"}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"prompt": "p", "seed": 1}"#).unwrap();
        assert_eq!(ReplayCache::<MockTransport>::key(Role::Llm, &a), ReplayCache::<MockTransport>::key(Role::Llm, &b));
        assert_ne!(
            ReplayCache::<MockTransport>::key(Role::Llm, &a),
            ReplayCache::<MockTransport>::key(Role::Captioner, &a)
        );
    }
}
