//! HTTP API over the reward engine, the judge harness and the audit store.
//!
//! | route | body / query | success |
//! |---|---|---|
//! | `GET /healthz` | | `{"status":"ok"}` |
//! | `POST /v1/reward/group` | [`api::RewardRequest`] | [`api::RewardResponse`] |
//! | `POST /v1/judge` | [`api::JudgeRequest`] | [`api::JudgeResponse`] |
//! | `GET /v1/audit/next?reviewer=` | | leased `AuditSample` |
//! | `POST /v1/audit/score` | [`api::ScoreRequest`] | updated `AuditSample` |
//! | `GET /v1/audit/report` | | `CalibrationReport` |
//!
//! Errors are `{"error": "..."}` with 400 (malformed or unknown fields),
//! 401, 404, 409 (re-score without `replace`), 502 (every judge failed) or
//! 503 (verifier unreachable, or the request timeout elapsed).

pub mod api;
pub mod config;
pub mod error;

use std::future::Future;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::{Request, State};
use axum::http::header::AUTHORIZATION;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use deepinsight_core::audit::{AuditError, AuditStore};
use deepinsight_core::gateway::GatewayError;
use deepinsight_core::{Gateway, PromptLibrary};
use thiserror::Error;
use tokio::net::TcpListener;

pub use config::{BearerToken, ConfigError, ServiceConfig};
pub use error::ApiError;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("server error: {0}")]
    Serve(String),
}

#[derive(Clone)]
pub struct AppState {
    pub config: Arc<ServiceConfig>,
    pub gateway: Gateway,
    pub prompts: Arc<PromptLibrary>,
    /// Single writer for the audit log.
    pub audit: Arc<Mutex<AuditStore>>,
    pub token: Option<BearerToken>,
}

impl AppState {
    /// Open the audit store and pick up the bearer token from the
    /// environment.
    pub fn new(config: ServiceConfig, gateway: Gateway) -> Result<Self, ServiceError> {
        config.validate()?;
        let store = AuditStore::open(&config.audit_dir)?;
        let token = config.bearer_token();
        Ok(Self {
            config: Arc::new(config),
            gateway,
            prompts: Arc::new(PromptLibrary::shipped()),
            audit: Arc::new(Mutex::new(store)),
            token,
        })
    }

    pub fn with_token(mut self, token: Option<BearerToken>) -> Self {
        self.token = token;
        self
    }
}

pub fn router(state: AppState) -> Router {
    let v1 = Router::new()
        .route("/reward/group", post(api::reward_group))
        .route("/judge", post(api::judge))
        .route("/audit/next", get(api::audit_next))
        .route("/audit/score", post(api::audit_score))
        .route("/audit/report", get(api::audit_report))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(api::healthz))
        .nest("/v1", v1)
        .layer(middleware::from_fn_with_state(state.clone(), deadline))
        .layer(middleware::from_fn(request_log))
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|h| token.matches_header(h));
        if !ok {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

async fn deadline(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let budget = state.config.request_timeout();
    match tokio::time::timeout(budget, next.run(req)).await {
        Ok(resp) => resp,
        Err(_) => ApiError::Unavailable(format!("request exceeded {} ms", budget.as_millis()))
            .into_response(),
    }
}

async fn request_log(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let started = Instant::now();
    let resp = next.run(req).await;
    tracing::info!(
        %method,
        path,
        status = resp.status().as_u16(),
        elapsed_ms = started.elapsed().as_millis() as u64,
        "request"
    );
    resp
}

/// Serve on an already bound listener until `shutdown` resolves.
pub async fn serve_on(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| ServiceError::Serve(e.to_string()))
}

/// Bind `state.config.bind` and serve until `shutdown` resolves.
pub async fn serve(
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let addr = state.config.bind;
    let listener = TcpListener::bind(addr)
        .await
        .map_err(|e| ServiceError::Bind {
            addr: addr.to_string(),
            message: e.to_string(),
        })?;
    tracing::info!(%addr, "service listening");
    serve_on(listener, state, shutdown).await
}
