//! Blocking JSON-over-HTTP client with retry and exponential backoff, shared
//! by the chat, completion and embedding backends.

use std::thread;
use std::time::Duration;

use log::warn;
use serde_json::Value;

use crate::limiter::ConcurrencyLimiter;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("endpoint not configured")]
    NotConfigured,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpSettings {
    /// Base URL such as `http://localhost:8000/v1`, or the full route.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    /// Total attempts including the first one.
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl HttpSettings {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            model: model.into(),
            timeout: Duration::from_secs(60),
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
        }
    }

    /// Reads `<PREFIX>_ENDPOINT`, `<PREFIX>_API_KEY` and `<PREFIX>_MODEL`.
    pub fn from_env(prefix: &str) -> Option<Self> {
        let endpoint = std::env::var(format!("{prefix}_ENDPOINT")).ok()?;
        let model = std::env::var(format!("{prefix}_MODEL")).unwrap_or_default();
        let mut s = Self::new(endpoint, model);
        s.api_key = std::env::var(format!("{prefix}_API_KEY")).ok();
        Some(s)
    }

    pub fn url_for(&self, route: &str) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with(route) {
            base.to_string()
        } else {
            format!("{base}/{}", route.trim_start_matches('/'))
        }
    }
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    http: reqwest::blocking::Client,
    settings: HttpSettings,
    limiter: ConcurrencyLimiter,
}

impl JsonClient {
    pub fn new(settings: HttpSettings, limiter: ConcurrencyLimiter) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self {
            http,
            settings,
            limiter,
        })
    }

    pub fn settings(&self) -> &HttpSettings {
        &self.settings
    }

    /// POSTs `body` to `route`, retrying transport failures, 429 and 5xx.
    pub fn post(&self, route: &str, body: &Value) -> Result<Value, ClientError> {
        let url = self.settings.url_for(route);
        let attempts = self.settings.max_attempts.max(1);
        let mut backoff = self.settings.initial_backoff;
        let mut last_err = ClientError::Transport("no attempt made".into());
        for attempt in 1..=attempts {
            match self.post_once(&url, body) {
                Ok(v) => return Ok(v),
                Err(e) if retryable(&e) => {
                    warn!("POST {url} attempt {attempt}/{attempts} failed: {e}");
                    last_err = e;
                    if attempt < attempts {
                        thread::sleep(backoff);
                        backoff = backoff.saturating_mul(2);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(last_err)
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, ClientError> {
        let _permit = self.limiter.acquire();
        let mut req = self.http.post(url).json(body);
        if let Some(key) = &self.settings.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| ClientError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ClientError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| ClientError::Protocol(format!("non-JSON body: {e}")))
    }
}

fn retryable(e: &ClientError) -> bool {
    match e {
        ClientError::Transport(_) => true,
        ClientError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}
