mod common;

use std::collections::HashSet;

use common::{samples, start, Harness, Options};
use deepinsight_core::audit::{AuditSample, CalibrationReport, SampleStatus};
use deepinsight_core::gateway::mock::MockScript;
use serde_json::json;

async fn next(h: &Harness, reviewer: &str) -> reqwest::Response {
    h.client
        .get(h.url(&format!("/v1/audit/next?reviewer={reviewer}")))
        .send()
        .await
        .unwrap()
}

async fn score(
    h: &Harness,
    sample_id: &str,
    reviewer: &str,
    v: f64,
    replace: bool,
) -> reqwest::Response {
    h.client
        .post(h.url("/v1/audit/score"))
        .json(&json!({
            "sample_id": sample_id,
            "reviewer_id": reviewer,
            "scores": {"insight_quality": v, "logical_validity": v, "completeness": v, "clarity": v},
            "replace": replace,
        }))
        .send()
        .await
        .unwrap()
}

async fn report(h: &Harness) -> CalibrationReport {
    h.client
        .get(h.url("/v1/audit/report"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap()
}

#[tokio::test]
async fn concurrent_reviewers_never_share_a_lease() {
    let h = start(
        MockScript::default(),
        Options {
            samples: samples(200),
            ..Options::default()
        },
    )
    .await;
    let mut seen = HashSet::new();
    for trial in 0..100 {
        let (a, b) = tokio::join!(next(&h, "alice"), next(&h, "bob"));
        assert_eq!(a.status(), 200);
        assert_eq!(b.status(), 200);
        let a: AuditSample = a.json().await.unwrap();
        let b: AuditSample = b.json().await.unwrap();
        assert_ne!(a.sample_id, b.sample_id, "trial {trial}");
        assert!(seen.insert(a.sample_id.clone()));
        assert!(seen.insert(b.sample_id.clone()));
        let (ra, rb) = tokio::join!(
            score(&h, &a.sample_id, "alice", 0.5, false),
            score(&h, &b.sample_id, "bob", 0.5, false)
        );
        assert_eq!(ra.status(), 200);
        assert_eq!(rb.status(), 200);
    }
    assert_eq!(seen.len(), 200);
    assert_eq!(next(&h, "alice").await.status(), 404);
}

#[tokio::test]
async fn repeat_poll_returns_the_same_lease() {
    let h = start(
        MockScript::default(),
        Options {
            samples: samples(3),
            ..Options::default()
        },
    )
    .await;
    let first: AuditSample = next(&h, "alice").await.json().await.unwrap();
    let again: AuditSample = next(&h, "alice").await.json().await.unwrap();
    assert_eq!(first.sample_id, again.sample_id);
    assert_eq!(
        score(&h, &first.sample_id, "alice", 0.4, false)
            .await
            .status(),
        200
    );
    let after: AuditSample = next(&h, "alice").await.json().await.unwrap();
    assert_ne!(after.sample_id, first.sample_id);
}

#[tokio::test]
async fn score_then_report_reflects_the_bin() {
    let h = start(
        MockScript::default(),
        Options {
            samples: samples(5),
            ..Options::default()
        },
    )
    .await;
    let empty = report(&h).await;
    assert_eq!(empty.total_scored, 0);
    assert!(empty.rows.is_empty());

    let s: AuditSample = next(&h, "r1").await.json().await.unwrap();
    let resp = score(&h, &s.sample_id, "r1", 0.3, false).await;
    assert_eq!(resp.status(), 200);
    let scored: AuditSample = resp.json().await.unwrap();
    assert_eq!(scored.status, SampleStatus::Scored);

    let r = report(&h).await;
    assert_eq!(r.total_scored, 1);
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.rows[0].bin, s.score_bin);
    assert!((r.rows[0].human_mean - 0.3).abs() < 1e-12);
    assert!((r.rows[0].llm_mean - s.llm_total).abs() < 1e-12);
}

#[tokio::test]
async fn rescoring_needs_replace() {
    let h = start(
        MockScript::default(),
        Options {
            samples: samples(2),
            ..Options::default()
        },
    )
    .await;
    let s: AuditSample = next(&h, "r1").await.json().await.unwrap();
    assert_eq!(
        score(&h, &s.sample_id, "r1", 0.3, false).await.status(),
        200
    );
    assert_eq!(
        score(&h, &s.sample_id, "r2", 0.9, false).await.status(),
        409
    );
    let replaced: AuditSample = score(&h, &s.sample_id, "r2", 0.9, true)
        .await
        .json()
        .await
        .unwrap();
    assert_eq!(replaced.reviewer_id.as_deref(), Some("r2"));
    let r = report(&h).await;
    assert_eq!(r.total_scored, 1);
    assert!((r.rows[0].human_mean - 0.9).abs() < 1e-12);
}

#[tokio::test]
async fn audit_errors() {
    let h = start(
        MockScript::default(),
        Options {
            samples: samples(1),
            ..Options::default()
        },
    )
    .await;
    assert_eq!(
        score(&h, "0000000000000000", "r", 0.5, false)
            .await
            .status(),
        404
    );
    let s: AuditSample = next(&h, "r").await.json().await.unwrap();
    assert_eq!(score(&h, &s.sample_id, "r", 1.5, false).await.status(), 400);
    let missing_reviewer = h.client.get(h.url("/v1/audit/next")).send().await.unwrap();
    assert_eq!(missing_reviewer.status(), 400);
    let extra = h
        .client
        .post(h.url("/v1/audit/score"))
        .json(&json!({
            "sample_id": s.sample_id,
            "reviewer_id": "r",
            "scores": {"insight_quality": 0.5, "logical_validity": 0.5, "completeness": 0.5, "clarity": 0.5, "total": 0.5},
        }))
        .send()
        .await
        .unwrap();
    assert_eq!(extra.status(), 400);
    assert_eq!(score(&h, &s.sample_id, "r", 0.5, false).await.status(), 200);
    assert_eq!(next(&h, "r").await.status(), 404);
}

#[tokio::test]
async fn bearer_token_guards_v1_only() {
    let h = start(
        MockScript::default(),
        Options {
            samples: samples(1),
            token: Some("s3cret"),
            ..Options::default()
        },
    )
    .await;
    assert_eq!(
        h.client
            .get(h.url("/healthz"))
            .send()
            .await
            .unwrap()
            .status(),
        200
    );
    let anon = h
        .client
        .get(h.url("/v1/audit/report"))
        .send()
        .await
        .unwrap();
    assert_eq!(anon.status(), 401);
    let wrong = h
        .client
        .get(h.url("/v1/audit/report"))
        .bearer_auth("guess")
        .send()
        .await
        .unwrap();
    assert_eq!(wrong.status(), 401);
    assert!(!wrong.text().await.unwrap().contains("s3cret"));
    let ok = h
        .client
        .get(h.url("/v1/audit/report"))
        .bearer_auth("s3cret")
        .send()
        .await
        .unwrap();
    assert_eq!(ok.status(), 200);
}
