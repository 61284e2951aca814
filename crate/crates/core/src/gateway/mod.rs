//! Chat-completion client for OpenAI-compatible endpoints.
//!
//! One dialect is supported: `POST {endpoint}/chat/completions` with the
//! usual `messages`, `max_tokens`, `temperature`, `logprobs`/`top_logprobs`
//! fields. Calls are bounded by a gateway-wide in-flight limit and retried with
//! jittered exponential backoff on 429, 5xx, timeouts and connection errors.

mod backoff;
pub mod mock;
mod wire;

use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

pub use backoff::{BackoffSchedule, RetryPolicy};

/// Default environment variable holding the provider API key.
pub const DEFAULT_API_KEY_ENV: &str = "DEEPINSIGHT_API_KEY";

/// Top-logprobs requested whenever score extraction needs them.
pub const SCORE_TOP_LOGPROBS: u8 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub max_tokens: u32,
    pub temperature: f64,
    /// 0 disables logprobs; at most 20.
    pub top_logprobs: u8,
    /// Provider-specific fields copied into the request body as-is
    /// (e.g. a reasoning-mode toggle).
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl CompletionRequest {
    pub fn single_user(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            messages: vec![Message::user(prompt)],
            max_tokens: 4096,
            temperature: 0.0,
            top_logprobs: 0,
            extra: serde_json::Map::new(),
        }
    }

    pub fn with_top_logprobs(mut self, n: u8) -> Self {
        self.top_logprobs = n;
        self
    }

    pub fn with_max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest(
                "at least one user message is required".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_tokens must be at least 1".into(),
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(
                "temperature must be finite and non-negative".into(),
            ));
        }
        if self.top_logprobs > 20 {
            return Err(GatewayError::InvalidRequest(
                "top_logprobs must be in 0..=20".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub token: String,
    pub logprob: f64,
}

/// One sampled token with its natural-log probability and the provider's
/// top alternatives, sorted by descending logprob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobs {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_alternatives: Vec<Alternative>,
}

impl TokenLogprobs {
    pub fn new(token: impl Into<String>, logprob: f64, mut alternatives: Vec<Alternative>) -> Self {
        alternatives.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        Self {
            token: token.into(),
            logprob: logprob.min(0.0),
            top_alternatives: alternatives,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    /// Present only when logprobs were requested and the provider returned them.
    pub token_logprobs: Option<Vec<TokenLogprobs>>,
    pub usage: Usage,
    #[serde(with = "duration_millis")]
    pub provider_latency: Duration,
    /// Provider attempts made, including the successful one.
    pub attempts: u32,
}

mod duration_millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("gave up after {attempts} attempts: {last_error}")]
    Exhausted { attempts: u32, last_error: String },
    #[error("provider rejected the request with status {status}: {body}")]
    NonRetryable { status: u16, body: String },
    #[error("provider call timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("no credential configured (set {env_var})")]
    CredentialMissing { env_var: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("gateway configuration: {0}")]
    Config(String),
}

impl GatewayError {
    /// Whether the failure came from reaching the provider at all, as opposed
    /// to the provider answering with something unusable.
    pub fn is_unreachable(&self) -> bool {
        matches!(
            self,
            GatewayError::Exhausted { .. }
                | GatewayError::Timeout { .. }
                | GatewayError::CredentialMissing { .. }
        )
    }
}

/// API key. Never printed.
#[derive(Clone)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Self {
        Self(key.into())
    }

    pub fn from_env(var: &str) -> Option<Self> {
        std::env::var(var).ok().filter(|v| !v.is_empty()).map(Self)
    }

    fn expose(&self) -> &str {
        &self.0
    }

    fn scrub(&self, text: &str) -> String {
        if self.0.is_empty() {
            text.to_string()
        } else {
            text.replace(&self.0, "[REDACTED]")
        }
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey([REDACTED])")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    /// Base URL up to and including the API version, e.g. `https://host/v1`.
    pub endpoint: String,
    pub api_key_env: String,
    #[serde(with = "duration_millis")]
    pub request_timeout: Duration,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8089/v1".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            request_timeout: Duration::from_secs(120),
            max_in_flight: 8,
            retry: RetryPolicy::default(),
        }
    }
}

/// Shareable client; clones share the connection pool and in-flight bound.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

struct Inner {
    http: reqwest::Client,
    config: GatewayConfig,
    key: Option<ApiKey>,
    permits: Semaphore,
    calls: AtomicU32,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("endpoint", &self.inner.config.endpoint)
            .field("max_in_flight", &self.inner.config.max_in_flight)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(config: GatewayConfig, key: Option<ApiKey>) -> Result<Self, GatewayError> {
        if config.max_in_flight == 0 {
            return Err(GatewayError::Config(
                "max_in_flight must be at least 1".into(),
            ));
        }
        let http = reqwest::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self {
            inner: Arc::new(Inner {
                http,
                permits: Semaphore::new(config.max_in_flight),
                config,
                key,
                calls: AtomicU32::new(0),
            }),
        })
    }

    /// Build with the key read from `config.api_key_env`.
    pub fn from_env(config: GatewayConfig) -> Result<Self, GatewayError> {
        let key = ApiKey::from_env(&config.api_key_env);
        Self::new(config, key)
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.inner.config
    }

    /// Total provider attempts issued by this gateway so far.
    pub fn provider_calls(&self) -> u32 {
        self.inner.calls.load(Ordering::Relaxed)
    }

    pub async fn complete(
        &self,
        req: &CompletionRequest,
    ) -> Result<CompletionResponse, GatewayError> {
        req.validate()?;
        let key = self
            .inner
            .key
            .as_ref()
            .ok_or_else(|| GatewayError::CredentialMissing {
                env_var: self.inner.config.api_key_env.clone(),
            })?;
        let url = format!(
            "{}/chat/completions",
            self.inner.config.endpoint.trim_end_matches('/')
        );
        let body = wire::request_body(req);
        let mut schedule = BackoffSchedule::new(self.inner.config.retry.clone());
        let max_attempts = self.inner.config.retry.max_retries + 1;
        let mut attempts = 0;
        let mut last_error;
        let mut timed_out;

        loop {
            attempts += 1;
            let outcome = {
                let _permit = self.inner.permits.acquire().await.expect("semaphore open");
                self.inner.calls.fetch_add(1, Ordering::Relaxed);
                let started = Instant::now();
                let sent = self
                    .inner
                    .http
                    .post(&url)
                    .bearer_auth(key.expose())
                    .json(&body)
                    .send()
                    .await;
                match sent {
                    Ok(resp) => {
                        let status = resp.status();
                        match resp.text().await {
                            Ok(text) => Ok((status, text, started.elapsed())),
                            Err(e) => Err(e),
                        }
                    }
                    Err(e) => Err(e),
                }
            };

            match outcome {
                Ok((status, text, latency)) if status.is_success() => {
                    let mut parsed = wire::parse_response(&text, req.top_logprobs > 0)
                        .map_err(|e| GatewayError::MalformedResponse(key.scrub(&e)))?;
                    parsed.provider_latency = latency;
                    parsed.attempts = attempts;
                    return Ok(parsed);
                }
                Ok((status, text, _)) => {
                    let code = status.as_u16();
                    let text = key.scrub(&text);
                    if code == 429 || status.is_server_error() {
                        last_error = format!("status {code}: {}", truncate(&text, 200));
                        timed_out = false;
                    } else {
                        tracing::warn!(status = code, "provider rejected request");
                        return Err(GatewayError::NonRetryable {
                            status: code,
                            body: text,
                        });
                    }
                }
                Err(e) => {
                    timed_out = e.is_timeout();
                    last_error = key.scrub(&e.to_string());
                }
            }

            if attempts >= max_attempts {
                tracing::warn!(attempts, error = %last_error, "provider retries exhausted");
                return Err(if timed_out {
                    GatewayError::Timeout { attempts }
                } else {
                    GatewayError::Exhausted {
                        attempts,
                        last_error,
                    }
                });
            }
            let delay = schedule.next_delay();
            tracing::debug!(attempt = attempts, delay_ms = delay.as_millis() as u64, error = %last_error, "retrying provider call");
            tokio::time::sleep(delay).await;
        }
    }

    /// Run all requests with at most `max_in_flight` outstanding at once.
    /// Results are returned in input order, each tagged with its index.
    pub async fn complete_batch(
        &self,
        reqs: &[CompletionRequest],
        max_in_flight: usize,
    ) -> Result<Vec<(usize, Result<CompletionResponse, GatewayError>)>, GatewayError> {
        if max_in_flight == 0 {
            return Err(GatewayError::Config(
                "max_in_flight must be at least 1".into(),
            ));
        }
        let mut results: Vec<_> = stream::iter(reqs.iter().enumerate())
            .map(|(i, req)| async move { (i, self.complete(req).await) })
            .buffer_unordered(max_in_flight)
            .collect()
            .await;
        results.sort_by_key(|(i, _)| *i);
        Ok(results)
    }
}

fn truncate(text: &str, max: usize) -> &str {
    if text.len() <= max {
        return text;
    }
    let mut end = max;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    &text[..end]
}
