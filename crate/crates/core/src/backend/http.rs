use std::collections::BTreeMap;

use reqwest::blocking::Client;
use serde_json::Value;

use super::{BackendError, Endpoint, Role, Transport};

const BODY_EXCERPT: usize = 200;

/// Blocking HTTP transport; one endpoint per role.
pub struct HttpTransport {
    client: Client,
    endpoints: BTreeMap<Role, Endpoint>,
}

impl HttpTransport {
    pub fn new(endpoints: BTreeMap<Role, Endpoint>) -> Result<Self, BackendError> {
        let client = Client::builder().build().map_err(|e| BackendError::InvalidEndpoint(e.to_string()))?;
        Ok(Self { client, endpoints })
    }

    pub fn single(role: Role, endpoint: Endpoint) -> Result<Self, BackendError> {
        Self::new(BTreeMap::from([(role, endpoint)]))
    }

    pub fn endpoint(&self, role: Role) -> Option<&Endpoint> {
        self.endpoints.get(&role)
    }
}

fn excerpt(body: &str) -> String {
    match body.char_indices().nth(BODY_EXCERPT) {
        Some((cut, _)) => format!("{}...", &body[..cut]),
        None => body.to_string(),
    }
}

impl Transport for HttpTransport {
    fn post(&self, role: Role, body: &Value) -> Result<Value, BackendError> {
        let endpoint =
            self.endpoints.get(&role).ok_or_else(|| BackendError::NotConfigured { role, var: role.env_name("URL") })?;
        let mut request = self.client.post(endpoint.url_for(role)).timeout(endpoint.timeout).json(body);
        if let Some(token) = &endpoint.auth_token {
            request = request.bearer_auth(token);
        }
        let seconds = endpoint.timeout.as_secs_f64();
        let classify = |e: reqwest::Error| {
            if e.is_timeout() {
                BackendError::Timeout { role, seconds }
            } else {
                BackendError::Transport { role, message: e.to_string() }
            }
        };
        let response = request.send().map_err(classify)?;
        let status = response.status();
        let text = response.text().map_err(classify)?;
        if !status.is_success() {
            return Err(BackendError::Status { role, status: status.as_u16(), body: excerpt(&text) });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::protocol(role, format!("invalid JSON: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_bodies_are_truncated() {
        let long = "x".repeat(500);
        assert_eq!(excerpt(&long).len(), BODY_EXCERPT + 3);
        assert_eq!(excerpt("short"), "short");
    }
}
