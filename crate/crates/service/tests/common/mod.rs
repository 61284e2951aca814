#![allow(dead_code)]

use std::time::Duration;

use deepinsight_core::audit::{AuditSample, AuditStore, JudgedItem};
use deepinsight_core::gateway::mock::{MockScript, MockServer};
use deepinsight_core::gateway::{ApiKey, GatewayConfig, RetryPolicy};
use deepinsight_core::reward::{verifier_output, DimensionScores};
use deepinsight_core::Gateway;
use deepinsight_service::{serve_on, AppState, BearerToken, ServiceConfig};
use tempfile::TempDir;
use tokio::sync::oneshot;

pub struct Harness {
    pub base: String,
    pub client: reqwest::Client,
    pub mock: MockServer,
    _dir: TempDir,
    _stop: oneshot::Sender<()>,
}

impl Harness {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

pub struct Options {
    pub samples: Vec<AuditSample>,
    pub token: Option<&'static str>,
    pub request_timeout_ms: u64,
    pub endpoint: Option<String>,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            samples: Vec::new(),
            token: None,
            request_timeout_ms: 10_000,
            endpoint: None,
        }
    }
}

pub async fn start(script: MockScript, opts: Options) -> Harness {
    let mock = MockServer::start_local(script).await.unwrap();
    let dir = TempDir::new().unwrap();
    if !opts.samples.is_empty() {
        let mut store = AuditStore::open(dir.path()).unwrap();
        store.add_samples(opts.samples).unwrap();
    }
    let config = ServiceConfig {
        gateway: GatewayConfig {
            endpoint: opts.endpoint.unwrap_or_else(|| mock.endpoint()),
            retry: RetryPolicy::fast(1),
            request_timeout: Duration::from_secs(5),
            ..GatewayConfig::default()
        },
        audit_dir: dir.path().to_path_buf(),
        request_timeout_ms: opts.request_timeout_ms,
        ..ServiceConfig::default()
    };
    let gateway = Gateway::new(config.gateway.clone(), Some(ApiKey::new("test-key"))).unwrap();
    let state = AppState::new(config, gateway)
        .unwrap()
        .with_token(opts.token.map(BearerToken::new));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = oneshot::channel::<()>();
    tokio::spawn(serve_on(listener, state, async {
        let _ = rx.await;
    }));
    Harness {
        base,
        client: reqwest::Client::new(),
        mock,
        _dir: dir,
        _stop: tx,
    }
}

/// Verifier reply whose four dimensions all equal `total`, so the weighted
/// total is `total` whatever the weights.
pub fn flat_verifier(total: f64) -> String {
    verifier_output(total, DimensionScores::new(total, total, total, total))
}

pub fn item(i: usize, llm_total: f64) -> JudgedItem {
    JudgedItem {
        item_id: format!("item-{i:04}"),
        model_family: "fam".into(),
        benchmark: "bench".into(),
        llm_total,
        question: format!("question {i}"),
        response: format!("response {i}"),
    }
}

pub fn samples(n: usize) -> Vec<AuditSample> {
    (0..n)
        .map(|i| AuditSample::pending(&item(i, (i % 10) as f64 / 10.0 + 0.05)).unwrap())
        .collect()
}
