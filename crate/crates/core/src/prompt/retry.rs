use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::grammar::ParseError;
use crate::backend::{BackendError, LanguageModel};
use crate::hash::attempt_seed;

pub const DEFAULT_MAX_ATTEMPTS: u32 = 8;
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_seed: u64,
    pub temperature: f64,
}

impl RetryPolicy {
    pub fn new(base_seed: u64) -> Self {
        Self { max_attempts: DEFAULT_MAX_ATTEMPTS, base_seed, temperature: DEFAULT_TEMPERATURE }
    }

    pub fn with_base_seed(self, base_seed: u64) -> Self {
        Self { base_seed, ..self }
    }

    pub fn validate(&self) -> Result<(), RetryError> {
        if self.max_attempts == 0 {
            return Err(RetryError::InvalidPolicy("max_attempts must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(RetryError::InvalidPolicy(format!("temperature {} is not usable", self.temperature)));
        }
        Ok(())
    }

    pub fn seed_for(&self, attempt: u32) -> u64 {
        attempt_seed(self.base_seed, attempt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub index: u32,
    pub seed: u64,
    pub raw: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ParseError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryOutcome<T> {
    pub payload: T,
    pub attempts_used: u32,
    pub transcript: Vec<Attempt>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetryError {
    #[error("invalid retry policy: {0}")]
    InvalidPolicy(String),
    #[error("no parsable response after {attempts} attempts; last error: {last}")]
    RetriesExhausted { attempts: u32, last: ParseError, transcript: Vec<Attempt> },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Queries `llm` until `parse` accepts a response, rotating the seed on
/// every attempt. Backend failures end the loop immediately.
pub fn run_with_retry<T>(
    prompt: &str,
    parse: impl Fn(&str) -> Result<T, ParseError>,
    policy: &RetryPolicy,
    llm: &dyn LanguageModel,
) -> Result<RetryOutcome<T>, RetryError> {
    policy.validate()?;
    let mut transcript = Vec::new();
    for index in 0..policy.max_attempts {
        let seed = policy.seed_for(index);
        let raw = llm.complete(prompt, seed, policy.temperature)?;
        match parse(&raw) {
            Ok(payload) => {
                transcript.push(Attempt { index, seed, raw, error: None });
                return Ok(RetryOutcome { payload, attempts_used: index + 1, transcript });
            }
            Err(e) => transcript.push(Attempt { index, seed, raw, error: Some(e) }),
        }
    }
    let last = transcript.last().and_then(|a| a.error.clone()).expect("at least one failed attempt");
    Err(RetryError::RetriesExhausted { attempts: policy.max_attempts, last, transcript })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::grammar::parse_keywords;
    use std::sync::Mutex;

    struct Scripted {
        replies: Vec<String>,
        seeds: Mutex<Vec<u64>>,
    }

    impl Scripted {
        fn new(replies: &[&str]) -> Self {
            Self { replies: replies.iter().map(|s| s.to_string()).collect(), seeds: Mutex::new(vec![]) }
        }
        fn calls(&self) -> usize {
            self.seeds.lock().unwrap().len()
        }
    }

    impl LanguageModel for Scripted {
        fn complete(&self, _: &str, seed: u64, _: f64) -> Result<String, BackendError> {
            let mut seeds = self.seeds.lock().unwrap();
            let i = seeds.len().min(self.replies.len() - 1);
            seeds.push(seed);
            Ok(self.replies[i].clone())
        }
    }

    #[test]
    fn succeeds_on_third_attempt() {
        let llm = Scripted::new(&["nope", "still prose", "KEYWORDS: [\"a\"]"]);
        let policy = RetryPolicy::new(11);
        let out = run_with_retry("p", parse_keywords, &policy, &llm).unwrap();
        assert_eq!(out.attempts_used, 3);
        assert_eq!(llm.calls(), 3);
        let seeds: Vec<u64> = out.transcript.iter().map(|a| a.seed).collect();
        assert_eq!(seeds, vec![policy.seed_for(0), policy.seed_for(1), policy.seed_for(2)]);
        assert_eq!(*llm.seeds.lock().unwrap(), seeds);
    }

    #[test]
    fn first_try_success() {
        let llm = Scripted::new(&["KEYWORDS: [\"a\"]"]);
        let out = run_with_retry("p", parse_keywords, &RetryPolicy::new(0), &llm).unwrap();
        assert_eq!(out.attempts_used, 1);
        assert_eq!(out.transcript.len(), 1);
    }

    #[test]
    fn exhaustion_after_exact_attempt_count() {
        let llm = Scripted::new(&["prose"]);
        let policy = RetryPolicy { max_attempts: 4, ..RetryPolicy::new(0) };
        match run_with_retry("p", parse_keywords, &policy, &llm) {
            Err(RetryError::RetriesExhausted { attempts, transcript, .. }) => {
                assert_eq!(attempts, 4);
                assert_eq!(transcript.len(), 4);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(llm.calls(), 4);
    }

    #[test]
    fn backend_errors_are_not_retried() {
        struct Down;
        impl LanguageModel for Down {
            fn complete(&self, _: &str, _: u64, _: f64) -> Result<String, BackendError> {
                Err(BackendError::Status { role: crate::backend::Role::Llm, status: 500, body: String::new() })
            }
        }
        let err = run_with_retry("p", parse_keywords, &RetryPolicy::new(0), &Down).unwrap_err();
        assert!(matches!(err, RetryError::Backend(BackendError::Status { status: 500, .. })));
    }

    #[test]
    fn zero_attempts_is_invalid() {
        let llm = Scripted::new(&["x"]);
        let policy = RetryPolicy { max_attempts: 0, ..RetryPolicy::new(0) };
        assert!(matches!(run_with_retry("p", parse_keywords, &policy, &llm), Err(RetryError::InvalidPolicy(_))));
        assert_eq!(llm.calls(), 0);
    }
}
