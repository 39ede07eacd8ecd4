//! Chat-completion transport used by the LLM adapter.

use std::time::Duration;

use serde_json::json;
use thiserror::Error;

pub const ENDPOINT_VAR: &str = "LLM_API_ENDPOINT";
pub const KEY_VAR: &str = "LLM_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub correlation_id: u64,
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    /// Worth retrying: timeouts, connection failures, 429 and 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
}

pub trait ChatTransport: Send + Sync {
    /// Returns the assistant message text.
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

/// OpenAI-style `chat/completions` over HTTP.
pub struct HttpTransport {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    trace: bool,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self {
            endpoint: endpoint.into(),
            api_key,
            agent,
            trace: false,
        }
    }

    /// Reads the endpoint and key from the environment.
    pub fn from_env(timeout: Duration) -> Result<Self, TransportError> {
        let endpoint = std::env::var(ENDPOINT_VAR)
            .map_err(|_| TransportError::Fatal(format!("{ENDPOINT_VAR} is not set")))?;
        Ok(Self::new(endpoint, std::env::var(KEY_VAR).ok(), timeout))
    }

    /// Log request and response bodies at info level.
    pub fn with_trace(mut self, trace: bool) -> Self {
        self.trace = trace;
        self
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let body = json!({
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if self.trace {
            let auth = if self.api_key.is_some() { "Bearer [redacted]" } else { "none" };
            log::info!(
                "llm request {} to {} (authorization: {auth}): {body}",
                request.correlation_id,
                self.endpoint
            );
        }
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("X-Request-Id", request.correlation_id.to_string());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed => {
                TransportError::Transient(e.to_string())
            }
            other => TransportError::Fatal(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        if self.trace {
            log::info!("llm response {} ({status}): {text}", request.correlation_id);
        }
        match status {
            200..=299 => {}
            429 | 500..=599 => {
                return Err(TransportError::Transient(format!("HTTP {status}")));
            }
            _ => return Err(TransportError::Fatal(format!("HTTP {status}: {text}"))),
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| TransportError::Fatal(format!("response is not JSON: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| TransportError::Fatal("response has no choices[0].message.content".into()))
    }
}
