mod common;

use std::process::Stdio;
use std::time::Duration;

use common::{core_fixture, fast_config, run, s, stderr, stdout};
use deepinsight_core::gateway::mock::{MockReply, MockRule, MockScript, MockServer};
use deepinsight_core::judge::judge_output;
use deepinsight_core::reward::{verifier_output, DimensionScores};
use serde_json::Value;
use tokio::io::{AsyncBufReadExt, BufReader};

fn annotation_script() -> MockScript {
    serde_json::from_str(
        &std::fs::read_to_string(core_fixture("mock_annotation_script.json")).unwrap(),
    )
    .unwrap()
}

fn json(out: &std::process::Output) -> Value {
    serde_json::from_str(&stdout(out)).unwrap_or_else(|e| panic!("{e}: {}", stdout(out)))
}

#[tokio::test]
async fn validate_good_corpus() {
    let out = run(&["validate", "--in", s(&core_fixture("mini_corpus.jsonl"))]).await;
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "20/20 valid");
}

#[tokio::test]
async fn validate_names_the_broken_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(core_fixture("mini_corpus.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{\"id\": \"broken\", \"question\": 1}";
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, lines.join("\n")).unwrap();
    let out = run(&["validate", "--in", s(&path)]).await;
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stdout(&out).trim(), "19/20 valid");
    assert!(stderr(&out).contains("line 3:"), "{}", stderr(&out));
    let out = run(&["--json", "validate", "--in", s(&path)]).await;
    assert_eq!(json(&out)["errors"][0]["line"], 3);
}

#[tokio::test]
async fn usage_errors_exit_2() {
    assert_eq!(run(&["frobnicate"]).await.status.code(), Some(2));
    assert_eq!(run(&["validate"]).await.status.code(), Some(2));
    assert_eq!(
        run(&["--max-in-flight", "0", "stats", "--in", "x"])
            .await
            .status
            .code(),
        Some(2)
    );
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "nonsense_key = 1\n").unwrap();
    let out = run(&["--config", s(&cfg), "stats", "--in", "x"]).await;
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("invalid config"));
}

#[tokio::test]
async fn every_subcommand_has_help() {
    let subcommands: &[&[&str]] = &[
        &[],
        &["annotate"],
        &["validate"],
        &["stats"],
        &["emit-stages"],
        &["judge"],
        &["reward"],
        &["entropy"],
        &["entropy", "trace"],
        &["entropy", "spikes"],
        &["entropy", "check-bound"],
        &["audit"],
        &["audit", "sample"],
        &["audit", "ingest"],
        &["audit", "report"],
        &["serve"],
        &["mock-llm"],
    ];
    for sub in subcommands {
        let mut args = sub.to_vec();
        args.push("--help");
        let out = run(&args).await;
        assert_eq!(out.status.code(), Some(0), "{args:?}");
        assert!(stdout(&out).contains("Usage:"), "{args:?}");
    }
}

#[tokio::test]
async fn annotate_against_mock() {
    let mock = MockServer::start_local(annotation_script()).await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("corpus.jsonl");
    let out = run(&[
        "--endpoint",
        &mock.endpoint(),
        "--json",
        "annotate",
        "--in",
        s(&core_fixture("base_corpus.jsonl")),
        "--out",
        s(&out_path),
    ])
    .await;
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = json(&out);
    assert_eq!(report["accepted"], 18);
    assert_eq!(report["total"], 20);
    assert_eq!(report["failure_breakdown"]["ParseFailed"], 2);

    let parse = |text: &str| -> Vec<Value> {
        text.lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let expected: Vec<Value> =
        parse(&std::fs::read_to_string(core_fixture("mini_corpus.jsonl")).unwrap())
            .into_iter()
            .filter(|v| v["id"] != "dit-0015" && v["id"] != "dit-0018")
            .collect();
    let written = parse(&std::fs::read_to_string(&out_path).unwrap());
    assert_eq!(written, expected);
    assert!(dir.path().join("corpus.jsonl.report.json").exists());

    let check = run(&["validate", "--in", s(&out_path)]).await;
    assert_eq!(stdout(&check).trim(), "18/18 valid");
}

#[tokio::test]
async fn annotate_failure_threshold_exits_1() {
    let mock = MockServer::start_local(annotation_script()).await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "--endpoint",
        &mock.endpoint(),
        "annotate",
        "--in",
        s(&core_fixture("base_corpus.jsonl")),
        "--out",
        s(&dir.path().join("c.jsonl")),
        "--max-attempts",
        "1",
        "--max-failure-rate",
        "0.05",
    ])
    .await;
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("accepted 18/20"));
    assert!(stderr(&out).contains("failure rate"));
}

#[tokio::test]
async fn annotate_interrupt_writes_partial() {
    // The first five records answer at once, the rest hang.
    let mut script = annotation_script();
    for rule in script.rules.iter_mut().skip(5) {
        rule.responses = rule
            .responses
            .drain(..)
            .map(|r| r.delayed(60_000))
            .collect();
    }
    let mock = MockServer::start_local(script).await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("corpus.jsonl");
    let child = common::command()
        .args([
            "--endpoint",
            &mock.endpoint(),
            "--max-in-flight",
            "20",
            "annotate",
            "--in",
            s(&core_fixture("base_corpus.jsonl")),
            "--out",
            s(&out_path),
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(10);
    while mock.request_count() < 20 {
        assert!(
            tokio::time::Instant::now() < deadline,
            "mock saw {} requests",
            mock.request_count()
        );
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    tokio::time::sleep(Duration::from_millis(200)).await;
    let pid = child.id().unwrap().to_string();
    let status = std::process::Command::new("kill")
        .args(["-INT", &pid])
        .status()
        .unwrap();
    assert!(status.success());
    let out = tokio::time::timeout(Duration::from_secs(10), child.wait_with_output())
        .await
        .expect("exits after interrupt")
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains(".partial"));
    assert!(!out_path.exists());
    let partial = std::fs::read_to_string(dir.path().join("corpus.jsonl.partial")).unwrap();
    let ids: Vec<String> = partial
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(
        ids,
        ["dit-0001", "dit-0002", "dit-0003", "dit-0004", "dit-0005"]
    );
}

#[tokio::test]
async fn stats_match_recount() {
    let path = core_fixture("mini_corpus.jsonl");
    let out = run(&["--json", "stats", "--in", s(&path)]).await;
    assert_eq!(out.status.code(), Some(0));
    let stats = json(&out);
    let text = std::fs::read_to_string(&path).unwrap();
    let (mut total, mut n) = (0usize, 0usize);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        n += 1;
        for key in ["construction", "theorem_call", "transformation"] {
            if v["tech"][key].is_string() {
                total += 1;
            }
        }
    }
    let recount = total as f64 / n as f64;
    assert!((stats["mean_techniques"].as_f64().unwrap() - recount).abs() < 1e-12);
    assert_eq!(stats["record_count"], 20);
    let text_out = run(&["stats", "--in", s(&path)]).await;
    assert!(stdout(&text_out).contains("records: 20"));
}

#[tokio::test]
async fn emit_stages_writes_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "emit-stages",
        "--in",
        s(&core_fixture("mini_corpus.jsonl")),
        "--out-dir",
        s(dir.path()),
        "--schedule",
        "three",
    ])
    .await;
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for f in [
        "stage1_proof_only.jsonl",
        "stage2_sketch_proof.jsonl",
        "stage3_full.jsonl",
        "manifest.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let stage1 = std::fs::read_to_string(dir.path().join("stage1_proof_only.jsonl")).unwrap();
    let first: Value = serde_json::from_str(stage1.lines().next().unwrap()).unwrap();
    assert_eq!(first["messages"][0]["role"], "user");
    assert_eq!(first["messages"][1]["role"], "assistant");
    assert_eq!(first["source_id"], "dit-0001");

    let two = tempfile::tempdir().unwrap();
    let out = run(&[
        "--json",
        "emit-stages",
        "--in",
        s(&core_fixture("mini_corpus.jsonl")),
        "--out-dir",
        s(two.path()),
        "--schedule",
        "two",
        "--target",
        "original",
    ])
    .await;
    let manifest = json(&out);
    assert_eq!(manifest["stages"].as_array().unwrap().len(), 2);
    assert!(!two.path().join("stage2_sketch_proof.jsonl").exists());
    let bad = run(&[
        "emit-stages",
        "--in",
        "x",
        "--out-dir",
        "y",
        "--schedule",
        "four",
    ])
    .await;
    assert_eq!(bad.status.code(), Some(2));
}

#[tokio::test]
async fn judge_benchmark_against_mock() {
    let script = MockScript::default()
        .with_rule(
            MockRule::for_model(
                "judge-a",
                vec![MockReply::text(judge_output(0.8, 0.8, 0.8, 0.8))],
            )
            .repeating(),
        )
        .with_rule(
            MockRule::for_model(
                "judge-b",
                vec![MockReply::text(judge_output(0.6, 0.6, 0.6, 0.6))],
            )
            .repeating(),
        );
    let mock = MockServer::start_local(script).await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("report.json");
    let out = run(&[
        "--endpoint",
        &mock.endpoint(),
        "judge",
        "--benchmark",
        s(&core_fixture("benchmarks/fimo_synthetic.jsonl")),
        "--name",
        "fimo",
        "--proofs",
        s(&core_fixture("benchmarks/fimo_synthetic_proofs.jsonl")),
        "--judges",
        "judge-a,judge-b",
        "--out",
        s(&report_path),
    ])
    .await;
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("FIMO: 71 items"));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!((report["mean"].as_f64().unwrap() - 0.7).abs() < 1e-12);
    assert_eq!(report["item_count"], 71);
    assert_eq!(mock.request_count(), 142);
}

#[tokio::test]
async fn judge_all_failed_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let mock = MockServer::start_local(MockScript::default().with_fallback(MockReply::status(400)))
        .await
        .unwrap();
    let out = run(&[
        "--config",
        s(&cfg),
        "--endpoint",
        &mock.endpoint(),
        "judge",
        "--benchmark",
        s(&core_fixture("benchmarks/fimo_synthetic.jsonl")),
        "--proofs",
        s(&core_fixture("benchmarks/fimo_synthetic_proofs.jsonl")),
        "--judges",
        "judge-a",
    ])
    .await;
    assert_eq!(out.status.code(), Some(1), "{}", stdout(&out));
    assert!(stderr(&out).contains("every judgement failed"));
}

fn reward_script(totals: &[f64]) -> MockScript {
    totals
        .iter()
        .enumerate()
        .fold(MockScript::default(), |acc, (i, &t)| {
            acc.with_rule(
                MockRule::when_user_contains(
                    format!("<<r{i}>>"),
                    vec![MockReply::text(verifier_output(
                        t,
                        DimensionScores::new(t, t, t, t),
                    ))],
                )
                .repeating(),
            )
        })
}

#[tokio::test]
async fn reward_group_against_mock() {
    let mock = MockServer::start_local(reward_script(&[0.8, 0.2]))
        .await
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.txt");
    let r = dir.path().join("r.jsonl");
    std::fs::write(&q, "Prove that 1 + 1 = 2.\n").unwrap();
    std::fs::write(&r, "\"first <<r0>>\"\n\"second <<r1>>\"\n").unwrap();
    let out = run(&[
        "--endpoint",
        &mock.endpoint(),
        "--json",
        "reward",
        "--question-file",
        s(&q),
        "--responses-file",
        s(&r),
    ])
    .await;
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let body = json(&out);
    let adv: Vec<f64> = body["advantages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((adv[0] - 1.0).abs() < 1e-12 && (adv[1] + 1.0).abs() < 1e-12);
    assert!((body["rewards"][0].as_f64().unwrap() - 0.8).abs() < 1e-12);

    std::fs::write(&r, "not json\n").unwrap();
    let bad = run(&[
        "--endpoint",
        &mock.endpoint(),
        "reward",
        "--question-file",
        s(&q),
        "--responses-file",
        s(&r),
    ])
    .await;
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("responses line 1"));
}

#[tokio::test]
async fn reward_unreachable_exits_1_without_leaking_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let q = dir.path().join("q.txt");
    let r = dir.path().join("r.jsonl");
    std::fs::write(&q, "Q").unwrap();
    std::fs::write(&r, "\"a\"\n").unwrap();
    let closed = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}/v1", l.local_addr().unwrap())
    };
    let out = common::command()
        .env("DEEPINSIGHT_API_KEY", "sk-very-secret-value")
        .args([
            "--config",
            s(&cfg),
            "--verbose",
            "--endpoint",
            &closed,
            "reward",
            "--question-file",
            s(&q),
            "--responses-file",
            s(&r),
        ])
        .output()
        .await
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("verifier unreachable"));
    assert!(!stderr(&out).contains("sk-very-secret-value"));
    assert!(!stdout(&out).contains("sk-very-secret-value"));
}

#[tokio::test]
async fn entropy_subcommands() {
    let dump = core_fixture("sample_logprobs.jsonl");
    let out = run(&["entropy", "trace", "--dump", s(&dump)]).await;
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = stdout(&out);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "position,token,entropy,is_spike");
    assert_eq!(lines.len(), 6);
    let h1: f64 = lines[2].split(',').nth(2).unwrap().parse().unwrap();
    assert!((h1 - 4f64.ln()).abs() < 1e-9);

    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("t.csv");
    let out = run(&[
        "entropy",
        "trace",
        "--dump",
        s(&dump),
        "--out",
        s(&csv_path),
    ])
    .await;
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&csv_path).unwrap(), csv);

    let out = run(&["--json", "entropy", "spikes", "--dump", s(&dump)]).await;
    assert_eq!(out.status.code(), Some(0));
    assert!(json(&out)["spikes"].is_array());
    assert_eq!(
        run(&["entropy", "spikes", "--dump", s(&dump), "--window", "1"])
            .await
            .status
            .code(),
        Some(2)
    );

    let out = run(&[
        "--json",
        "--seed",
        "7",
        "entropy",
        "check-bound",
        "--length",
        "6",
    ])
    .await;
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let result = json(&out);
    assert_eq!(result["all_satisfied"], true);
    assert_eq!(result["sequences"], 6u64.pow(6));
    assert!((result["total_probability"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!(result["table"].is_null());
    let too_big = run(&[
        "entropy",
        "check-bound",
        "--reasoning",
        "30",
        "--length",
        "8",
    ])
    .await;
    assert_eq!(too_big.status.code(), Some(2));
}

#[tokio::test]
async fn audit_sample_ingest_report() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let pool = core_fixture("calibration_pool.jsonl");
    let out = run(&[
        "audit",
        "sample",
        "--pool",
        s(&pool),
        "--per-stratum",
        "1000",
        "--store",
        s(&store),
    ])
    .await;
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("drew 160 samples, added 160"));

    let empty = run(&["audit", "report", "--store", s(&store)]).await;
    assert_eq!(empty.status.code(), Some(1));

    let scores = core_fixture("calibration_scores.jsonl");
    let out = run(&[
        "audit",
        "ingest",
        "--scores",
        s(&scores),
        "--store",
        s(&store),
    ])
    .await;
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let again = run(&[
        "audit",
        "ingest",
        "--scores",
        s(&scores),
        "--store",
        s(&store),
    ])
    .await;
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("already scored"));
    let replaced = run(&[
        "audit",
        "ingest",
        "--scores",
        s(&scores),
        "--store",
        s(&store),
        "--replace",
    ])
    .await;
    assert_eq!(replaced.status.code(), Some(0));

    let out = run(&["--json", "audit", "report", "--store", s(&store)]).await;
    let report = json(&out);
    let expected = [
        (22, 0.13, 0.15),
        (34, 0.32, 0.30),
        (41, 0.51, 0.46),
        (36, 0.68, 0.64),
        (27, 0.84, 0.79),
    ];
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    for (row, (n, llm, human)) in rows.iter().zip(expected) {
        assert_eq!(row["samples"], n);
        assert!((row["llm_mean"].as_f64().unwrap() - llm).abs() < 1e-9);
        assert!((row["human_mean"].as_f64().unwrap() - human).abs() < 1e-9);
    }
    let text = run(&["audit", "report", "--store", s(&store)]).await;
    assert!(stdout(&text).contains("0.8-1.0"));
}

#[tokio::test]
async fn audit_sample_is_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let pool = core_fixture("calibration_pool.jsonl");
    let mut ids = Vec::new();
    for (i, seed) in ["11", "11", "12"].iter().enumerate() {
        let store = dir.path().join(format!("s{i}"));
        let out = run(&[
            "--seed",
            seed,
            "audit",
            "sample",
            "--pool",
            s(&pool),
            "--per-stratum",
            "1",
            "--store",
            s(&store),
        ])
        .await;
        assert_eq!(out.status.code(), Some(0));
        let events = std::fs::read_to_string(store.join("events.jsonl")).unwrap();
        let picked: Vec<String> = events
            .lines()
            .map(|l| {
                serde_json::from_str::<Value>(l).unwrap()["sample"]["sample_id"]
                    .as_str()
                    .unwrap()
                    .to_string()
            })
            .collect();
        ids.push(picked);
    }
    assert_eq!(ids[0], ids[1]);
    assert_ne!(ids[0], ids[2]);
}

async fn first_line(child: &mut tokio::process::Child) -> String {
    let stdout = child.stdout.take().unwrap();
    let mut line = String::new();
    tokio::time::timeout(
        Duration::from_secs(10),
        BufReader::new(stdout).read_line(&mut line),
    )
    .await
    .expect("server announces itself")
    .unwrap();
    line.trim().to_string()
}

#[tokio::test]
async fn mock_llm_serves_echo() {
    let mut child = common::command()
        .args(["mock-llm", "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let endpoint = first_line(&mut child).await;
    assert!(endpoint.starts_with("http://127.0.0.1:"), "{endpoint}");
    let body: Value = reqwest::Client::new()
        .post(format!("{endpoint}/chat/completions"))
        .json(&serde_json::json!({"model": "m", "messages": [{"role": "user", "content": "echo me"}]}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(body["choices"][0]["message"]["content"], "echo me");
    child.kill().await.unwrap();
}

#[tokio::test]
async fn serve_answers_health_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = common::command()
        .args([
            "serve",
            "--bind",
            "127.0.0.1:0",
            "--audit-dir",
            s(&dir.path().join("store")),
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let line = first_line(&mut child).await;
    let base = line
        .strip_prefix("listening on ")
        .expect("announce line")
        .to_string();
    let client = reqwest::Client::new();
    let health = client.get(format!("{base}/healthz")).send().await.unwrap();
    assert_eq!(health.status(), 200);
    let next = client
        .get(format!("{base}/v1/audit/next?reviewer=r"))
        .send()
        .await
        .unwrap();
    assert_eq!(next.status(), 404);
    child.kill().await.unwrap();
}
