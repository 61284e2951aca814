mod common;

use std::io::Write;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use common::gateway_for;
use deepinsight_core::gateway::mock::{MockReply, MockRule, MockScript, MockServer};
use deepinsight_core::gateway::{
    Alternative, ApiKey, CompletionRequest, Gateway, GatewayConfig, GatewayError, RetryPolicy,
    TokenLogprobs,
};

fn status(code: u16) -> MockReply {
    MockReply::Status {
        status: code,
        body: format!("status {code}"),
    }
}

#[tokio::test]
async fn echo_is_deterministic() {
    let server = MockServer::start_local(MockScript::default())
        .await
        .unwrap();
    let gateway = gateway_for(&server);
    let proof = "By AM-GM, $a + b \\ge 2\\sqrt{ab}$.";
    let resp = gateway
        .complete(&CompletionRequest::single_user("m", proof))
        .await
        .unwrap();
    assert_eq!(resp.text, proof);
    assert_eq!(resp.attempts, 1);
    assert!(resp.token_logprobs.is_none());
}

#[tokio::test]
async fn rate_limits_are_retried() {
    let script = MockScript::sequence(vec![status(429), status(429), MockReply::text("ok")]);
    let server = MockServer::start_local(script).await.unwrap();
    let gateway = gateway_for(&server);
    let resp = gateway
        .complete(&CompletionRequest::single_user("m", "x"))
        .await
        .unwrap();
    assert_eq!(resp.text, "ok");
    assert_eq!(resp.attempts, 3);
    assert_eq!(server.request_count(), 3);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let server = MockServer::start_local(MockScript::sequence(vec![status(400)]))
        .await
        .unwrap();
    let gateway = gateway_for(&server);
    let err = gateway
        .complete(&CompletionRequest::single_user("m", "x"))
        .await
        .unwrap_err();
    assert!(matches!(
        err,
        GatewayError::NonRetryable { status: 400, .. }
    ));
    assert_eq!(server.request_count(), 1);
}

#[tokio::test]
async fn retries_exhaust() {
    let script = MockScript::default().with_rule(MockRule::any(vec![status(503)]).repeating());
    let server = MockServer::start_local(script).await.unwrap();
    let gateway = gateway_for(&server);
    let err = gateway
        .complete(&CompletionRequest::single_user("m", "x"))
        .await
        .unwrap_err();
    assert!(matches!(err, GatewayError::Exhausted { attempts: 3, .. }));
    assert!(err.is_unreachable());
}

#[tokio::test]
async fn slow_provider_times_out() {
    let script = MockScript::sequence(vec![MockReply::Delay {
        millis: 500,
        reply: Box::new(MockReply::text("late")),
    }]);
    let server = MockServer::start_local(script).await.unwrap();
    let config = GatewayConfig {
        endpoint: server.endpoint(),
        request_timeout: Duration::from_millis(50),
        retry: RetryPolicy::no_retries(),
        ..GatewayConfig::default()
    };
    let gateway = Gateway::new(config, Some(ApiKey::new("k"))).unwrap();
    let err = gateway
        .complete(&CompletionRequest::single_user("m", "x"))
        .await
        .unwrap_err();
    assert!(matches!(err, GatewayError::Timeout { attempts: 1 }));
}

#[tokio::test]
async fn missing_credential_fails_before_any_call() {
    let server = MockServer::start_local(MockScript::default())
        .await
        .unwrap();
    let config = GatewayConfig {
        endpoint: server.endpoint(),
        ..GatewayConfig::default()
    };
    let gateway = Gateway::new(config, None).unwrap();
    let err = gateway
        .complete(&CompletionRequest::single_user("m", "x"))
        .await
        .unwrap_err();
    assert!(matches!(err, GatewayError::CredentialMissing { .. }));
    assert_eq!(server.request_count(), 0);
}

#[tokio::test]
async fn batch_respects_concurrency_and_order() {
    let script = MockScript::default().with_latency(20);
    let server = MockServer::start_local(script).await.unwrap();
    let gateway = gateway_for(&server);
    let reqs: Vec<_> = (0..50)
        .map(|i| CompletionRequest::single_user("m", format!("req {i}")))
        .collect();
    let results = gateway.complete_batch(&reqs, 8).await.unwrap();
    assert_eq!(results.len(), 50);
    for (i, (idx, r)) in results.iter().enumerate() {
        assert_eq!(*idx, i);
        assert_eq!(r.as_ref().unwrap().text, format!("req {i}"));
    }
    assert!(server.peak_in_flight() <= 8);
    assert!(server.peak_in_flight() >= 2);
    assert!(gateway.complete_batch(&[], 8).await.unwrap().is_empty());
    assert!(gateway.complete_batch(&reqs, 0).await.is_err());
}

#[tokio::test]
async fn per_item_failures_keep_indices() {
    let script = MockScript::default()
        .with_rule(MockRule::when_user_contains("item 3", vec![status(400)]))
        .with_rule(MockRule::when_user_contains("item 7", vec![status(400)]));
    let server = MockServer::start_local(script).await.unwrap();
    let gateway = gateway_for(&server);
    let reqs: Vec<_> = (0..10)
        .map(|i| CompletionRequest::single_user("m", format!("item {i}")))
        .collect();
    let results = gateway.complete_batch(&reqs, 4).await.unwrap();
    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, r)| r.is_err())
        .map(|(i, _)| *i)
        .collect();
    assert_eq!(failed, vec![3, 7]);
    assert_eq!(results.iter().filter(|(_, r)| r.is_ok()).count(), 8);
}

#[tokio::test]
async fn logprobs_arrive_intact() {
    let tokens = vec![
        TokenLogprobs::new("\"insight_quality\": ", -0.01, vec![]),
        TokenLogprobs::new(
            "0.7",
            -0.1,
            vec![
                Alternative {
                    token: "0.7".into(),
                    logprob: -0.1,
                },
                Alternative {
                    token: "0.8".into(),
                    logprob: -2.4,
                },
            ],
        ),
    ];
    let script = MockScript::sequence(vec![MockReply::Text {
        content: "\"insight_quality\": 0.7".into(),
        logprobs: Some(tokens.clone()),
    }]);
    let server = MockServer::start_local(script).await.unwrap();
    let gateway = gateway_for(&server);
    let req = CompletionRequest::single_user("m", "x").with_top_logprobs(20);
    let resp = gateway.complete(&req).await.unwrap();
    assert_eq!(resp.token_logprobs.unwrap(), tokens);
}

#[tokio::test]
async fn concurrent_clients_each_see_their_own_queue() {
    let script = MockScript::default()
        .with_rule(MockRule::for_model(
            "a",
            vec![MockReply::text("a1"), MockReply::text("a2")],
        ))
        .with_rule(MockRule::for_model(
            "b",
            vec![MockReply::text("b1"), MockReply::text("b2")],
        ));
    let server = MockServer::start_local(script).await.unwrap();
    let (ga, gb) = (gateway_for(&server), gateway_for(&server));
    let run = |g: Gateway, model: &'static str| async move {
        let mut out = Vec::new();
        for _ in 0..2 {
            out.push(
                g.complete(&CompletionRequest::single_user(model, "x"))
                    .await
                    .unwrap()
                    .text,
            );
        }
        out
    };
    let (a, b) = tokio::join!(run(ga, "a"), run(gb, "b"));
    assert_eq!(a, ["a1", "a2"]);
    assert_eq!(b, ["b1", "b2"]);
}

#[derive(Clone, Default)]
struct Capture(Arc<Mutex<Vec<u8>>>);

impl Write for Capture {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[tokio::test(flavor = "current_thread")]
async fn credential_never_leaks() {
    const SECRET: &str = "sk-live-0123456789abcdef";
    let capture = Capture::default();
    let sink = capture.clone();
    let subscriber = tracing_subscriber::fmt()
        .with_max_level(tracing::Level::TRACE)
        .with_writer(move || sink.clone())
        .finish();
    let _guard = tracing::subscriber::set_default(subscriber);

    // A provider that reflects the bearer token back in its error bodies.
    let script = MockScript::sequence(vec![
        MockReply::Status {
            status: 500,
            body: format!("invalid token {SECRET}"),
        },
        MockReply::Status {
            status: 401,
            body: format!("unauthorized: Bearer {SECRET}"),
        },
    ]);
    let server = MockServer::start_local(script).await.unwrap();
    let config = GatewayConfig {
        endpoint: server.endpoint(),
        retry: RetryPolicy::fast(2),
        ..GatewayConfig::default()
    };
    let gateway = Gateway::new(config, Some(ApiKey::new(SECRET))).unwrap();
    let err = gateway
        .complete(&CompletionRequest::single_user("m", "x"))
        .await
        .unwrap_err();
    assert!(!err.to_string().contains(SECRET));
    assert!(!format!("{err:?}").contains(SECRET));
    assert!(!format!("{gateway:?}").contains(SECRET));
    let logs = String::from_utf8(capture.0.lock().unwrap().clone()).unwrap();
    assert!(!logs.is_empty());
    assert!(!logs.contains(SECRET));
}
