//! Blocking JSON-over-HTTP client shared by the remote backends.

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const MAX_RESPONSE_BYTES: u64 = 512 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    pub url: String,
    pub timeout: Duration,
    /// Extra attempts after a transport failure. HTTP error statuses are not retried.
    pub retries: u32,
    pub backoff: Duration,
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: Duration::from_secs(300),
            retries: 2,
            backoff: Duration::from_millis(500),
        }
    }
}

pub struct JsonService {
    name: String,
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl JsonService {
    pub fn new(name: impl Into<String>, config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            name: name.into(),
            config,
            agent,
        }
    }

    pub fn url(&self) -> &str {
        &self.config.url
    }

    pub fn unavailable(&self, reason: impl Into<String>) -> Error {
        Error::BackendUnavailable {
            backend: self.name.clone(),
            reason: reason.into(),
        }
    }

    pub fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::MalformedResponse {
            backend: self.name.clone(),
            reason: reason.into(),
        }
    }

    pub fn post<Req: Serialize, Resp: DeserializeOwned>(&self, body: &Req) -> Result<Resp> {
        let mut attempt = 0;
        let mut response = loop {
            match self.agent.post(&self.config.url).send_json(body) {
                Ok(r) => break r,
                Err(e) if attempt < self.config.retries => {
                    attempt += 1;
                    log::warn!(
                        "{}: attempt {attempt} failed ({e}); retrying",
                        self.name
                    );
                    thread::sleep(self.config.backoff * attempt);
                }
                Err(e) => return Err(self.unavailable(e.to_string())),
            }
        };
        let status = response.status();
        if !status.is_success() {
            let text = response
                .body_mut()
                .read_to_string()
                .unwrap_or_default();
            return Err(self.unavailable(format!("HTTP {status}: {}", text.trim())));
        }
        response
            .body_mut()
            .with_config()
            .limit(MAX_RESPONSE_BYTES)
            .read_json()
            .map_err(|e| self.malformed(e.to_string()))
    }
}
