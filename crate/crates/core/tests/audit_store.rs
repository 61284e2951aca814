mod common;

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::time::{Duration, Instant};

use common::{fixture, read_fixture};
use deepinsight_core::audit::{
    read_pool, stratified_sample, AuditError, AuditEvent, AuditSample, AuditStore, HumanScores,
    JudgedItem, ScoreBin, StratumKey, EVENTS_FILE,
};
use serde::Deserialize;
use serde_json::Value;

#[derive(Deserialize)]
struct ScoreLine {
    sample_id: String,
    reviewer_id: String,
    scores: HumanScores,
}

fn score_lines() -> Vec<ScoreLine> {
    read_fixture("calibration_scores.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn loaded_store(dir: &std::path::Path) -> AuditStore {
    let pool = read_pool(&fixture("calibration_pool.jsonl")).unwrap();
    let mut store = AuditStore::open(dir).unwrap();
    let samples: Vec<AuditSample> = pool
        .iter()
        .map(|i| AuditSample::pending(i).unwrap())
        .collect();
    assert_eq!(store.add_samples(samples).unwrap(), 160);
    for s in score_lines() {
        store
            .ingest_human_score(&s.sample_id, &s.reviewer_id, s.scores, false)
            .unwrap();
    }
    store
}

/// Per-bin means straight from the fixture files, bins assigned by hand.
fn oracle_rows() -> BTreeMap<usize, (usize, f64, f64)> {
    let pool: Vec<Value> = read_fixture("calibration_pool.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let scores: Vec<Value> = read_fixture("calibration_scores.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut rows: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for (item, score) in pool.iter().zip(&scores) {
        let llm = item["llm_total"].as_f64().unwrap();
        let bin = if llm >= 0.8 {
            4
        } else {
            (llm * 5.0).floor() as usize
        };
        let s = &score["scores"];
        let human = 0.30 * s["insight_quality"].as_f64().unwrap()
            + 0.30 * s["logical_validity"].as_f64().unwrap()
            + 0.25 * s["completeness"].as_f64().unwrap()
            + 0.15 * s["clarity"].as_f64().unwrap();
        let e = rows.entry(bin).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += llm;
        e.2 += human;
    }
    rows.into_iter()
        .map(|(b, (n, l, h))| (b, (n, l / n as f64, h / n as f64)))
        .collect()
}

#[test]
fn calibration_table_is_reproduced() {
    let dir = tempfile::tempdir().unwrap();
    let store = loaded_store(dir.path());
    let report = store.calibration_report().unwrap();
    let expected_rows = [
        (22, 0.13, 0.15),
        (34, 0.32, 0.30),
        (41, 0.51, 0.46),
        (36, 0.68, 0.64),
        (27, 0.84, 0.79),
    ];
    assert_eq!(report.rows.len(), 5);
    assert_eq!(report.total_scored, 160);
    let oracle = oracle_rows();
    for (i, (row, (n, llm, human))) in report.rows.iter().zip(expected_rows).enumerate() {
        assert_eq!(row.bin, ScoreBin::ALL[i]);
        assert_eq!(row.samples, n);
        assert!((row.llm_mean - llm).abs() < 1e-9, "{row:?}");
        assert!((row.human_mean - human).abs() < 1e-9, "{row:?}");
        assert!((row.difference - (llm - human)).abs() < 1e-9);
        let (on, ol, oh) = oracle[&i];
        assert_eq!(on, row.samples);
        assert!((ol - row.llm_mean).abs() < 1e-12 && (oh - row.human_mean).abs() < 1e-12);
    }
    assert!(report.correlation.unwrap() > 0.9);
}

#[test]
fn scored_samples_survive_reopen_and_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let before = {
        let store = loaded_store(dir.path());
        store.calibration_report().unwrap()
    };
    // Simulate a crash in the middle of the next append.
    let mut log = std::fs::OpenOptions::new()
        .append(true)
        .open(dir.path().join(EVENTS_FILE))
        .unwrap();
    log.write_all(b"{\"event\":\"scored\",\"seq\":99999,\"sample_")
        .unwrap();
    drop(log);
    let mut store = AuditStore::open(dir.path()).unwrap();
    assert_eq!(store.calibration_report().unwrap(), before);
    assert_eq!(store.pending_count(), 0);
    // The store stays writable after recovery.
    let id = store.samples()[0].sample_id.clone();
    store
        .ingest_human_score(&id, "r9", HumanScores::new(1.0, 1.0, 1.0, 1.0), true)
        .unwrap();
    drop(store);
    let store = AuditStore::open(dir.path()).unwrap();
    assert_eq!(store.get(&id).unwrap().reviewer_id.as_deref(), Some("r9"));
}

#[test]
fn corrupt_middle_line_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    {
        let mut store = AuditStore::open(dir.path()).unwrap();
        let pool = read_pool(&fixture("calibration_pool.jsonl")).unwrap();
        store
            .add_samples(vec![AuditSample::pending(&pool[0]).unwrap()])
            .unwrap();
    }
    let path = dir.path().join(EVENTS_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, format!("garbage\n{text}")).unwrap();
    assert!(matches!(
        AuditStore::open(dir.path()),
        Err(AuditError::Corrupt { line: 1, .. })
    ));
}

#[test]
fn rescoring_logs_the_prior_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = loaded_store(dir.path());
    let first = &score_lines()[0];
    let again = HumanScores::new(0.5, 0.5, 0.5, 0.5);
    assert!(matches!(
        store.ingest_human_score(&first.sample_id, "r2", again, false),
        Err(AuditError::AlreadyScored(_))
    ));
    store
        .ingest_human_score(&first.sample_id, "r2", again, true)
        .unwrap();
    let last = store.events().unwrap().pop().unwrap();
    match last {
        AuditEvent::Scored {
            replaced: Some(prior),
            ..
        } => {
            assert_eq!(prior.scores, first.scores);
            assert_eq!(
                prior.reviewer_id.as_deref(),
                Some(first.reviewer_id.as_str())
            );
        }
        other => panic!("unexpected event {other:?}"),
    }
    assert!(matches!(
        store.ingest_human_score(
            &first.sample_id,
            "r2",
            HumanScores::new(1.2, 0.0, 0.0, 0.0),
            true
        ),
        Err(AuditError::OutOfRangeScore { .. })
    ));
    assert!(matches!(
        store.ingest_human_score("nope", "r2", again, false),
        Err(AuditError::UnknownSample(_))
    ));
}

fn synthetic_pool(n: usize) -> Vec<JudgedItem> {
    let mut x = 99u64;
    (0..n)
        .map(|i| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
            JudgedItem {
                item_id: format!("i{i}"),
                model_family: ["a", "b", "c"][i % 3].into(),
                benchmark: ["FIMO", "HMMT"][(i / 3) % 2].into(),
                llm_total: ((x >> 11) as f64 / (1u64 << 53) as f64).min(1.0),
                question: "q".into(),
                response: "r".into(),
            }
        })
        .collect()
}

#[test]
fn stratified_sampling_contract() {
    let pool = synthetic_pool(1000);
    let picked = stratified_sample(&pool, 4, 5).unwrap();
    assert_eq!(picked, stratified_sample(&pool, 4, 5).unwrap());
    let ids: HashSet<&str> = picked.iter().map(|s| s.sample_id.as_str()).collect();
    assert_eq!(ids.len(), picked.len());
    let mut per_stratum: BTreeMap<StratumKey, usize> = BTreeMap::new();
    for s in &picked {
        let item = pool.iter().find(|i| i.item_id == s.item_id).unwrap();
        let key = StratumKey::of(item).unwrap();
        assert_eq!(key.score_bin, s.score_bin);
        assert_eq!(
            (key.model_family.as_str(), key.benchmark.as_str()),
            (s.model_family.as_str(), s.benchmark.as_str())
        );
        *per_stratum.entry(key).or_insert(0) += 1;
    }
    assert_eq!(per_stratum.len(), 30);
    assert!(per_stratum.values().all(|&c| c == 4));

    // Strata of sizes (10, 2, 0).
    let mut small = Vec::new();
    for i in 0..10 {
        small.push(JudgedItem {
            item_id: format!("a{i}"),
            model_family: "m".into(),
            benchmark: "FIMO".into(),
            llm_total: 0.1,
            question: "q".into(),
            response: "r".into(),
        });
    }
    for i in 0..2 {
        small.push(JudgedItem {
            item_id: format!("b{i}"),
            model_family: "m".into(),
            benchmark: "FIMO".into(),
            llm_total: 0.9,
            question: "q".into(),
            response: "r".into(),
        });
    }
    let picked = stratified_sample(&small, 5, 1).unwrap();
    assert_eq!(
        picked
            .iter()
            .filter(|s| s.score_bin == ScoreBin::B0)
            .count(),
        5
    );
    assert_eq!(
        picked
            .iter()
            .filter(|s| s.score_bin == ScoreBin::B4)
            .count(),
        2
    );
    assert_eq!(
        picked
            .iter()
            .filter(|s| s.score_bin == ScoreBin::B2)
            .count(),
        0
    );
    assert!(matches!(
        stratified_sample(&[], 1, 1),
        Err(AuditError::EmptyPool)
    ));
}

#[test]
fn two_reviewers_never_share_a_lease() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = AuditStore::open(dir.path()).unwrap();
    let pool = synthetic_pool(10);
    store
        .add_samples(
            pool.iter()
                .map(|i| AuditSample::pending(i).unwrap())
                .collect(),
        )
        .unwrap();
    let now = Instant::now();
    let ttl = Duration::from_secs(60);
    let a = store.lease_next("alice", now, ttl).unwrap();
    let b = store.lease_next("bob", now, ttl).unwrap();
    assert_ne!(a.sample_id, b.sample_id);
    assert_eq!(
        store.lease_next("alice", now, ttl).unwrap().sample_id,
        a.sample_id
    );
    // After expiry the sample is free again.
    let later = now + Duration::from_secs(61);
    let c = store.lease_next("carol", later, ttl).unwrap();
    assert_eq!(c.sample_id, a.sample_id);
}

#[test]
fn final_event_without_newline_is_kept() {
    let dir = tempfile::tempdir().unwrap();
    let pool = read_pool(&fixture("calibration_pool.jsonl")).unwrap();
    {
        let mut store = AuditStore::open(dir.path()).unwrap();
        store
            .add_samples(vec![AuditSample::pending(&pool[0]).unwrap()])
            .unwrap();
    }
    let path = dir.path().join(EVENTS_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.trim_end()).unwrap();
    {
        let mut store = AuditStore::open(dir.path()).unwrap();
        store
            .add_samples(vec![AuditSample::pending(&pool[1]).unwrap()])
            .unwrap();
    }
    assert_eq!(AuditStore::open(dir.path()).unwrap().samples().len(), 2);
}
