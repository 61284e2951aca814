//! Deterministic OpenAI-compatible mock server for tests and offline runs.
//!
//! A [`MockScript`] is an ordered list of rules. Each rule optionally matches
//! on the model name and/or a substring of the last user message, and carries a
//! queue of replies consumed in order. Requests that no rule can serve get the
//! fallback reply (echo of the user content by default). Every request is
//! recorded, and the server tracks its peak number of concurrent requests.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::sync::oneshot;

use super::wire::{self, WireRequest};
use super::{Role, TokenLogprobs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockReply {
    Text {
        content: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        logprobs: Option<Vec<TokenLogprobs>>,
    },
    Status {
        status: u16,
        #[serde(default)]
        body: String,
    },
    EchoUser,
    Delay {
        millis: u64,
        reply: Box<MockReply>,
    },
}

impl MockReply {
    pub fn text(content: impl Into<String>) -> Self {
        MockReply::Text {
            content: content.into(),
            logprobs: None,
        }
    }

    pub fn with_logprobs(content: impl Into<String>, logprobs: Vec<TokenLogprobs>) -> Self {
        MockReply::Text {
            content: content.into(),
            logprobs: Some(logprobs),
        }
    }

    pub fn status(status: u16) -> Self {
        MockReply::Status {
            status,
            body: format!("{{\"error\":\"scripted status {status}\"}}"),
        }
    }

    pub fn delayed(self, millis: u64) -> Self {
        MockReply::Delay {
            millis,
            reply: Box::new(self),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_contains: Option<String>,
    pub responses: Vec<MockReply>,
    /// Keep serving the last reply once the queue is drained.
    #[serde(default)]
    pub repeat_last: bool,
}

impl MockRule {
    pub fn any(responses: Vec<MockReply>) -> Self {
        Self {
            model: None,
            user_contains: None,
            responses,
            repeat_last: false,
        }
    }

    pub fn when_user_contains(needle: impl Into<String>, responses: Vec<MockReply>) -> Self {
        Self {
            user_contains: Some(needle.into()),
            ..Self::any(responses)
        }
    }

    pub fn for_model(model: impl Into<String>, responses: Vec<MockReply>) -> Self {
        Self {
            model: Some(model.into()),
            ..Self::any(responses)
        }
    }

    pub fn repeating(mut self) -> Self {
        self.repeat_last = true;
        self
    }

    fn matches(&self, model: &str, user: &str) -> bool {
        self.model.as_deref().is_none_or(|m| m == model)
            && self
                .user_contains
                .as_deref()
                .is_none_or(|n| user.contains(n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default = "default_fallback")]
    pub fallback: MockReply,
    /// Added to every request before answering.
    #[serde(default)]
    pub latency_ms: u64,
}

fn default_fallback() -> MockReply {
    MockReply::EchoUser
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            fallback: MockReply::EchoUser,
            latency_ms: 0,
        }
    }
}

impl MockScript {
    /// Serve `replies` in order to whoever asks, then fall back to echo.
    pub fn sequence(replies: Vec<MockReply>) -> Self {
        Self {
            rules: vec![MockRule::any(replies)],
            ..Self::default()
        }
    }

    pub fn with_rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn with_fallback(mut self, fallback: MockReply) -> Self {
        self.fallback = fallback;
        self
    }

    pub fn with_latency(mut self, millis: u64) -> Self {
        self.latency_ms = millis;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordedRequest {
    pub seq: usize,
    pub model: String,
    /// Content of the last user message.
    pub user_content: String,
    pub body: Value,
}

#[derive(Debug, Error)]
pub enum MockError {
    #[error("cannot bind {addr}: {message}")]
    PortUnavailable { addr: String, message: String },
}

struct RuleState {
    rule: MockRule,
    next: usize,
}

struct MockState {
    rules: Mutex<Vec<RuleState>>,
    fallback: MockReply,
    latency: Duration,
    requests: Mutex<Vec<RecordedRequest>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl MockState {
    fn pick(&self, model: &str, user: &str) -> MockReply {
        let mut rules = self.rules.lock().expect("mock rules poisoned");
        for state in rules.iter_mut() {
            if !state.rule.matches(model, user) || state.rule.responses.is_empty() {
                continue;
            }
            if state.next < state.rule.responses.len() {
                state.next += 1;
                return state.rule.responses[state.next - 1].clone();
            }
            if state.rule.repeat_last {
                return state.rule.responses.last().cloned().expect("non-empty");
            }
        }
        self.fallback.clone()
    }
}

struct InFlight<'a>(&'a MockState);

impl<'a> InFlight<'a> {
    fn enter(state: &'a MockState) -> Self {
        let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        state.peak.fetch_max(now, Ordering::SeqCst);
        Self(state)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn chat_completions(
    State(state): State<Arc<MockState>>,
    Json(body): Json<Value>,
) -> Response {
    let _guard = InFlight::enter(&state);
    let parsed: WireRequest = match serde_json::from_value(body.clone()) {
        Ok(p) => p,
        Err(e) => return (StatusCode::BAD_REQUEST, format!("bad request: {e}")).into_response(),
    };
    let user = parsed
        .messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.clone())
        .unwrap_or_default();
    let reply = {
        let mut requests = state.requests.lock().expect("mock log poisoned");
        let seq = requests.len();
        requests.push(RecordedRequest {
            seq,
            model: parsed.model.clone(),
            user_content: user.clone(),
            body,
        });
        state.pick(&parsed.model, &user)
    };
    if !state.latency.is_zero() {
        tokio::time::sleep(state.latency).await;
    }
    let wants_logprobs = parsed.logprobs.unwrap_or(false);
    render_reply(reply, &parsed.model, &user, wants_logprobs).await
}

async fn render_reply(
    mut reply: MockReply,
    model: &str,
    user: &str,
    wants_logprobs: bool,
) -> Response {
    loop {
        match reply {
            MockReply::Delay {
                millis,
                reply: inner,
            } => {
                tokio::time::sleep(Duration::from_millis(millis)).await;
                reply = *inner;
            }
            MockReply::Status { status, body } => {
                let code =
                    StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
                return (code, body).into_response();
            }
            MockReply::EchoUser => {
                let body = wire::response_body(model, user, None, prompt_tokens(user));
                return Json(body).into_response();
            }
            MockReply::Text { content, logprobs } => {
                let logprobs = logprobs.filter(|_| wants_logprobs);
                let body =
                    wire::response_body(model, &content, logprobs.as_deref(), prompt_tokens(user));
                return Json(body).into_response();
            }
        }
    }
}

fn prompt_tokens(user: &str) -> u64 {
    user.split_whitespace().count() as u64
}

/// A running mock endpoint. Shuts down when dropped.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl MockServer {
    /// Bind `addr` (use port 0 for an ephemeral port) and start serving.
    pub async fn start(script: MockScript, addr: SocketAddr) -> Result<Self, MockError> {
        let listener =
            tokio::net::TcpListener::bind(addr)
                .await
                .map_err(|e| MockError::PortUnavailable {
                    addr: addr.to_string(),
                    message: e.to_string(),
                })?;
        let bound = listener
            .local_addr()
            .map_err(|e| MockError::PortUnavailable {
                addr: addr.to_string(),
                message: e.to_string(),
            })?;
        let state = Arc::new(MockState {
            rules: Mutex::new(
                script
                    .rules
                    .into_iter()
                    .map(|rule| RuleState { rule, next: 0 })
                    .collect(),
            ),
            fallback: script.fallback,
            latency: Duration::from_millis(script.latency_ms),
            requests: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(chat_completions))
            .route("/chat/completions", post(chat_completions))
            .with_state(state.clone());
        let (tx, rx) = oneshot::channel::<()>();
        tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Ok(Self {
            addr: bound,
            state,
            shutdown: Some(tx),
        })
    }

    /// Start on an ephemeral loopback port.
    pub async fn start_local(script: MockScript) -> Result<Self, MockError> {
        Self::start(script, SocketAddr::from(([127, 0, 0, 1], 0))).await
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL suitable for [`super::GatewayConfig::endpoint`].
    pub fn endpoint(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state
            .requests
            .lock()
            .expect("mock log poisoned")
            .clone()
    }

    pub fn request_count(&self) -> usize {
        self.state.requests.lock().expect("mock log poisoned").len()
    }

    /// Largest number of requests observed in flight at once.
    pub fn peak_in_flight(&self) -> usize {
        self.state.peak.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}
