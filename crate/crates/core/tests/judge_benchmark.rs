mod common;

use common::{fixture, gateway_for};
use deepinsight_core::gateway::mock::{MockReply, MockRule, MockScript, MockServer};
use deepinsight_core::judge::{
    evaluate_insightfulness, judge_output, load_proof_source, run_benchmark, BenchmarkName,
    BenchmarkSpec, Coverage, Depth, Expression, ItemFlag, JudgeConfig,
};
use deepinsight_core::PromptLibrary;

fn fimo() -> BenchmarkSpec {
    BenchmarkSpec::load(
        &fixture("benchmarks/fimo_synthetic.jsonl"),
        BenchmarkName::Fimo,
    )
    .unwrap()
}

fn judges() -> Vec<String> {
    vec!["judge-a".into(), "judge-b".into()]
}

#[tokio::test]
async fn seventy_one_items_each_get_an_aggregate() {
    let spec = fimo();
    assert_eq!(spec.is_complete(), Some(true));
    let proofs = load_proof_source(&fixture("benchmarks/fimo_synthetic_proofs.jsonl")).unwrap();
    let script = MockScript::default()
        .with_rule(
            MockRule::for_model(
                "judge-a",
                vec![MockReply::text(judge_output(0.85, 1.0, 0.5, 1.0))],
            )
            .repeating(),
        )
        .with_rule(
            MockRule::for_model(
                "judge-b",
                vec![MockReply::text(judge_output(0.9, 1.0, 1.0, 0.5))],
            )
            .repeating(),
        );
    let server = MockServer::start_local(script).await.unwrap();
    let gateway = gateway_for(&server);
    let report = run_benchmark(
        &spec,
        &proofs,
        &judges(),
        &gateway,
        &PromptLibrary::shipped(),
        &JudgeConfig::default(),
    )
    .await;

    assert_eq!(report.item_count, 71);
    assert_eq!(
        report
            .items
            .iter()
            .filter(|i| i.aggregate.is_some())
            .count(),
        71
    );
    assert_eq!(report.failed_judgements, 0);
    // judge-a 0.85 exactly; judge-b literal 0.9 against a recomputed 0.85.
    for item in &report.items {
        assert!((item.score - 0.85).abs() < 1e-12);
        assert_eq!(
            item.flags,
            vec![ItemFlag::TotalMismatch {
                judge: "judge-b".into()
            }]
        );
    }
    assert!((report.mismatch_rate - 0.5).abs() < 1e-12);

    // Only the proof body reaches the judge.
    let requests = server.requests();
    assert_eq!(requests.len(), 142);
    for r in &requests {
        assert!(!r.user_content.contains("<tech>"));
        assert!(!r.user_content.contains("<sketch>"));
        assert!(!r
            .user_content
            .contains("Rewrite as an absolute value squared"));
        assert!(r
            .user_content
            .contains("Since squares of reals are non-negative"));
    }
}

#[tokio::test]
async fn perfect_verdicts_give_perfect_report() {
    let spec = fimo();
    let proofs = load_proof_source(&fixture("benchmarks/fimo_synthetic_proofs.jsonl")).unwrap();
    let script = MockScript::default().with_rule(
        MockRule::any(vec![MockReply::text(judge_output(1.0, 1.0, 1.0, 1.0))]).repeating(),
    );
    let server = MockServer::start_local(script).await.unwrap();
    let gateway = gateway_for(&server);
    let report = run_benchmark(
        &spec,
        &proofs,
        &judges(),
        &gateway,
        &PromptLibrary::shipped(),
        &JudgeConfig::default(),
    )
    .await;
    assert_eq!((report.mean, report.max), (1.0, 1.0));
    assert_eq!(report.per_judge_mean["judge-a"], 1.0);
}

#[tokio::test]
async fn missing_proofs_and_failing_judges_are_flagged() {
    let spec = BenchmarkSpec::load(
        &fixture("benchmarks/putnam_synthetic.jsonl"),
        BenchmarkName::Putnam,
    )
    .unwrap();
    assert_eq!(spec.is_complete(), Some(false));
    let mut proofs = std::collections::HashMap::new();
    proofs.insert("putnam-1".to_string(), "Add the numbers.".to_string());
    proofs.insert("putnam-2".to_string(), "Add them again.".to_string());
    let script = MockScript::default()
        .with_rule(
            MockRule::for_model(
                "judge-a",
                vec![MockReply::text(judge_output(0.7, 0.7, 0.7, 0.7))],
            )
            .repeating(),
        )
        .with_rule(
            MockRule::for_model("judge-b", vec![MockReply::text("no verdict here")]).repeating(),
        );
    let server = MockServer::start_local(script).await.unwrap();
    let gateway = gateway_for(&server);
    let report = run_benchmark(
        &spec,
        &proofs,
        &judges(),
        &gateway,
        &PromptLibrary::shipped(),
        &JudgeConfig::default(),
    )
    .await;
    assert_eq!(report.failed_judgements, 2);
    assert!((report.items[0].score - 0.7).abs() < 1e-12);
    assert!(report.items[0]
        .flags
        .iter()
        .any(|f| matches!(f, ItemFlag::JudgeFailed { judge, .. } if judge == "judge-b")));
    assert_eq!(report.items[2].score, 0.0);
    assert_eq!(report.items[2].flags, vec![ItemFlag::MissingProof]);
}

#[tokio::test]
async fn insightfulness_round_trip() {
    let grader = "1. **Mixed**\n2. **Simple scratch**\n3. **Incomplete**\n\nBelow is an explanation for each answer:\n\n1. Mixed: a deep identification is missing, though the ideas are not all shallow.\n2. Simple scratch: the roadmap is vague.\n3. Incomplete: the uniqueness step is missing, so the coverage is not comprehensive.";
    let script = MockScript::default()
        .with_rule(MockRule::for_model(
            "candidate",
            vec![MockReply::text("Try substituting y = 1.")],
        ))
        .with_rule(MockRule::for_model("grader", vec![MockReply::text(grader)]));
    let server = MockServer::start_local(script).await.unwrap();
    let gateway = gateway_for(&server);
    let eval = evaluate_insightfulness(
        "Find all f with f(xy) = f(x)f(y) - f(x+y) + 1.",
        "grader",
        "candidate",
        &gateway,
        &PromptLibrary::shipped(),
        &JudgeConfig::default(),
    )
    .await
    .unwrap();
    assert_eq!(eval.insight, "Try substituting y = 1.");
    assert_eq!(
        (
            eval.verdict.depth,
            eval.verdict.expression,
            eval.verdict.coverage
        ),
        (
            Depth::Mixed,
            Expression::SimpleScratch,
            Coverage::Incomplete
        )
    );
    let requests = server.requests();
    assert!(requests[1].user_content.contains("Try substituting y = 1."));
}
