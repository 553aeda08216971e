//! Minimal blocking JSON-over-HTTP client shared by the remote rewriter and
//! embedder backends.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::warn;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpSettings {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    /// Extra attempts after the first failure.
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for HttpSettings {
    fn default() -> Self {
        HttpSettings {
            endpoint: String::new(),
            api_key_env: None,
            timeout_secs: 60,
            retries: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    inner: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    retries: u32,
    backoff: Duration,
}

impl JsonClient {
    pub fn new(settings: &HttpSettings) -> Result<Self> {
        if settings.endpoint.is_empty() {
            return Err(Error::Config("http endpoint is not set".into()));
        }
        let api_key =
            match &settings.api_key_env {
                Some(var) => Some(std::env::var(var).map_err(|_| {
                    Error::Config(format!("environment variable `{var}` is not set"))
                })?),
                None => None,
            };
        let inner = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| Error::client(e.to_string()))?;
        Ok(JsonClient {
            inner,
            endpoint: settings.endpoint.clone(),
            api_key,
            retries: settings.retries,
            backoff: Duration::from_millis(settings.backoff_ms),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// POSTs `body`, retrying transport failures, 429 and 5xx responses with
    /// linear backoff. Other 4xx responses fail immediately.
    pub fn post(&self, body: &Value) -> Result<Value> {
        let mut attempt = 0;
        loop {
            let mut req = self.inner.post(&self.endpoint).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let outcome = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .json::<Value>()
                            .map_err(|e| Error::client(format!("invalid response body: {e}")));
                    }
                    let text = resp.text().unwrap_or_default();
                    let retryable = status.is_server_error() || status.as_u16() == 429;
                    let err = Error::client(format!("HTTP {status}: {text}"));
                    if !retryable {
                        return Err(err);
                    }
                    err
                }
                Err(e) => Error::client(e.to_string()),
            };
            if attempt >= self.retries {
                return Err(outcome);
            }
            attempt += 1;
            warn!(endpoint = %self.endpoint, attempt, error = %outcome, "request failed, retrying");
            std::thread::sleep(self.backoff * attempt);
        }
    }
}
