//! Human audit of judged outputs: stratified sampling, a durable score store
//! and per-bin calibration of LLM scores against human scores.
//!
//! The store is a directory holding an append-only JSONL event log
//! (`events.jsonl`) and a periodically compacted snapshot (`snapshot.json`).
//! Every event is fsynced before the in-memory state changes, so anything
//! acknowledged survives a restart. Loading applies the snapshot and then
//! replays log events newer than it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::reward::RewardWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScoreBin {
    #[serde(rename = "0.0-0.2")]
    B0,
    #[serde(rename = "0.2-0.4")]
    B1,
    #[serde(rename = "0.4-0.6")]
    B2,
    #[serde(rename = "0.6-0.8")]
    B3,
    #[serde(rename = "0.8-1.0")]
    B4,
}

impl ScoreBin {
    pub const ALL: [ScoreBin; 5] = [
        ScoreBin::B0,
        ScoreBin::B1,
        ScoreBin::B2,
        ScoreBin::B3,
        ScoreBin::B4,
    ];

    /// Lower-inclusive bins of width 0.2; the last bin includes 1.0.
    pub fn from_score(score: f64) -> Option<ScoreBin> {
        if !(0.0..=1.0).contains(&score) {
            return None;
        }
        // Scale with a small nudge so that e.g. 0.6 (0.59999… in binary
        // arithmetic) lands in its own bin.
        let i = ((score * 5.0) + 1e-9).floor() as usize;
        Some(Self::ALL[i.min(4)])
    }

    pub fn bounds(self) -> (f64, f64) {
        let i = self as usize as f64;
        (i * 0.2, (i + 1.0) * 0.2)
    }

    pub fn label(self) -> &'static str {
        match self {
            ScoreBin::B0 => "0.0-0.2",
            ScoreBin::B1 => "0.2-0.4",
            ScoreBin::B2 => "0.4-0.6",
            ScoreBin::B3 => "0.6-0.8",
            ScoreBin::B4 => "0.8-1.0",
        }
    }
}

impl fmt::Display for ScoreBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A judged output eligible for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedItem {
    pub item_id: String,
    pub model_family: String,
    pub benchmark: String,
    pub llm_total: f64,
    pub question: String,
    pub response: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanScores {
    pub insight_quality: f64,
    pub logical_validity: f64,
    pub completeness: f64,
    pub clarity: f64,
}

impl HumanScores {
    pub fn new(
        insight_quality: f64,
        logical_validity: f64,
        completeness: f64,
        clarity: f64,
    ) -> Self {
        Self {
            insight_quality,
            logical_validity,
            completeness,
            clarity,
        }
    }

    fn values(&self) -> [(&'static str, f64); 4] {
        [
            ("insight_quality", self.insight_quality),
            ("logical_validity", self.logical_validity),
            ("completeness", self.completeness),
            ("clarity", self.clarity),
        ]
    }

    pub fn validate(&self) -> Result<(), AuditError> {
        for (name, v) in self.values() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(AuditError::OutOfRangeScore {
                    dimension: name,
                    value: v,
                });
            }
        }
        Ok(())
    }

    /// Total with the verifier's dimension weights.
    pub fn weighted_total(&self, w: &RewardWeights) -> f64 {
        w.insight * self.insight_quality
            + w.validity * self.logical_validity
            + w.completeness * self.completeness
            + w.clarity * self.clarity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Pending,
    Scored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSample {
    pub sample_id: String,
    pub item_id: String,
    pub model_family: String,
    pub benchmark: String,
    pub llm_total: f64,
    pub score_bin: ScoreBin,
    pub question: String,
    pub response: String,
    pub human_scores: Option<HumanScores>,
    pub reviewer_id: Option<String>,
    pub status: SampleStatus,
}

impl AuditSample {
    pub fn pending(item: &JudgedItem) -> Result<Self, AuditError> {
        let score_bin =
            ScoreBin::from_score(item.llm_total).ok_or(AuditError::OutOfRangeScore {
                dimension: "llm_total",
                value: item.llm_total,
            })?;
        Ok(Self {
            sample_id: sample_id(item),
            item_id: item.item_id.clone(),
            model_family: item.model_family.clone(),
            benchmark: item.benchmark.clone(),
            llm_total: item.llm_total,
            score_bin,
            question: item.question.clone(),
            response: item.response.clone(),
            human_scores: None,
            reviewer_id: None,
            status: SampleStatus::Pending,
        })
    }
}

/// Stable id of an item within its family and benchmark.
pub fn sample_id(item: &JudgedItem) -> String {
    let mut h = Sha256::new();
    for part in [&item.model_family, &item.benchmark, &item.item_id] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("the pool is empty")]
    EmptyPool,
    #[error("per_stratum must be at least 1")]
    InvalidQuota,
    #[error("unknown sample `{0}`")]
    UnknownSample(String),
    #[error("{dimension} = {value} is outside [0, 1]")]
    OutOfRangeScore { dimension: &'static str, value: f64 },
    #[error("sample `{0}` is already scored; pass replace to re-score")]
    AlreadyScored(String),
    #[error("no scored samples")]
    NoScoredSamples,
    #[error("corrupt store at {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> AuditError + '_ {
    move |source| AuditError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StratumKey {
    pub model_family: String,
    pub benchmark: String,
    pub score_bin: ScoreBin,
}

impl StratumKey {
    pub fn of(item: &JudgedItem) -> Option<Self> {
        Some(Self {
            model_family: item.model_family.clone(),
            benchmark: item.benchmark.clone(),
            score_bin: ScoreBin::from_score(item.llm_total)?,
        })
    }
}

/// Draw min(per_stratum, size) items uniformly without replacement from each
/// (model family, benchmark, score bin) stratum. Strata are visited in key
/// order and picks keep pool order, so a fixed seed gives identical output.
pub fn stratified_sample(
    pool: &[JudgedItem],
    per_stratum: usize,
    seed: u64,
) -> Result<Vec<AuditSample>, AuditError> {
    if pool.is_empty() {
        return Err(AuditError::EmptyPool);
    }
    if per_stratum == 0 {
        return Err(AuditError::InvalidQuota);
    }
    let mut strata: BTreeMap<StratumKey, Vec<usize>> = BTreeMap::new();
    for (i, item) in pool.iter().enumerate() {
        let key = StratumKey::of(item).ok_or(AuditError::OutOfRangeScore {
            dimension: "llm_total",
            value: item.llm_total,
        })?;
        strata.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for members in strata.values() {
        let take = per_stratum.min(members.len());
        let mut picks: Vec<usize> = index::sample(&mut rng, members.len(), take).into_vec();
        picks.sort_unstable();
        for p in picks {
            out.push(AuditSample::pending(&pool[members[p]])?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorScore {
    pub reviewer_id: Option<String>,
    pub scores: HumanScores,
}

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    SampleAdded {
        seq: u64,
        at_ms: u64,
        sample: AuditSample,
    },
    Scored {
        seq: u64,
        at_ms: u64,
        sample_id: String,
        reviewer_id: String,
        scores: HumanScores,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        replaced: Option<PriorScore>,
    },
}

impl AuditEvent {
    pub fn seq(&self) -> u64 {
        match self {
            AuditEvent::SampleAdded { seq, .. } | AuditEvent::Scored { seq, .. } => *seq,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    samples: Vec<AuditSample>,
}

#[derive(Debug, Clone)]
struct Lease {
    reviewer: String,
    expires: Instant,
}

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

/// Events between automatic snapshot compactions.
pub const COMPACT_EVERY: u64 = 64;

#[derive(Debug)]
pub struct AuditStore {
    dir: PathBuf,
    log: File,
    seq: u64,
    snapshot_seq: u64,
    samples: Vec<AuditSample>,
    by_id: HashMap<String, usize>,
    leases: HashMap<String, Lease>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl AuditStore {
    /// Open (or create) a store directory and rebuild state from the
    /// snapshot and the log. A torn final log line from an interrupted
    /// write is ignored.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, AuditError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let (snapshot_seq, samples) = match fs::read_to_string(&snapshot_path) {
            Ok(text) => {
                let snap: Snapshot =
                    serde_json::from_str(&text).map_err(|e| AuditError::Corrupt {
                        path: snapshot_path.clone(),
                        line: 1,
                        message: e.to_string(),
                    })?;
                (snap.seq, snap.samples)
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => (0, Vec::new()),
            Err(e) => return Err(io_err(&snapshot_path)(e)),
        };
        let log_path = dir.join(EVENTS_FILE);
        let mut store = Self {
            log: OpenOptions::new()
                .create(true)
                .append(true)
                .read(true)
                .open(&log_path)
                .map_err(io_err(&log_path))?,
            dir,
            seq: snapshot_seq,
            snapshot_seq,
            by_id: samples
                .iter()
                .enumerate()
                .map(|(i, s)| (s.sample_id.clone(), i))
                .collect(),
            samples,
            leases: HashMap::new(),
        };
        store.replay(&log_path)?;
        Ok(store)
    }

    fn replay(&mut self, log_path: &Path) -> Result<(), AuditError> {
        let text = fs::read_to_string(log_path).map_err(io_err(log_path))?;
        let line_count = text.lines().count();
        let mut offset = 0;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            let start = offset;
            offset += line.len();
            if line.trim().is_empty() {
                continue;
            }
            let event: AuditEvent = match serde_json::from_str(line) {
                Ok(e) => e,
                Err(_) if i + 1 == line_count => {
                    // Drop the torn tail so later appends start on a fresh line.
                    tracing::warn!(line = i + 1, "truncating torn final event");
                    self.log.set_len(start as u64).map_err(io_err(log_path))?;
                    self.log.sync_data().map_err(io_err(log_path))?;
                    break;
                }
                Err(e) => {
                    return Err(AuditError::Corrupt {
                        path: log_path.to_path_buf(),
                        line: i + 1,
                        message: e.to_string(),
                    })
                }
            };
            if event.seq() <= self.snapshot_seq {
                continue;
            }
            self.seq = self.seq.max(event.seq());
            self.apply(event);
        }
        let len = self.log.metadata().map_err(io_err(log_path))?.len() as usize;
        if len > 0 && len == text.len() && !text.ends_with('\n') {
            self.log.write_all(b"\n").map_err(io_err(log_path))?;
            self.log.sync_data().map_err(io_err(log_path))?;
        }
        Ok(())
    }

    fn apply(&mut self, event: AuditEvent) {
        match event {
            AuditEvent::SampleAdded { sample, .. } => {
                if !self.by_id.contains_key(&sample.sample_id) {
                    self.by_id
                        .insert(sample.sample_id.clone(), self.samples.len());
                    self.samples.push(sample);
                }
            }
            AuditEvent::Scored {
                sample_id,
                reviewer_id,
                scores,
                ..
            } => {
                if let Some(&i) = self.by_id.get(&sample_id) {
                    let s = &mut self.samples[i];
                    s.human_scores = Some(scores);
                    s.reviewer_id = Some(reviewer_id);
                    s.status = SampleStatus::Scored;
                }
            }
        }
    }

    /// Durably append an event, then apply it.
    fn commit(&mut self, event: AuditEvent) -> Result<(), AuditError> {
        let log_path = self.dir.join(EVENTS_FILE);
        let mut line = serde_json::to_string(&event).expect("event serializes");
        line.push('\n');
        self.log
            .write_all(line.as_bytes())
            .map_err(io_err(&log_path))?;
        self.log.sync_data().map_err(io_err(&log_path))?;
        self.seq = event.seq();
        self.apply(event);
        if self.seq - self.snapshot_seq >= COMPACT_EVERY {
            self.compact()?;
        }
        Ok(())
    }

    /// Write a snapshot of the current state (atomic rename).
    pub fn compact(&mut self) -> Result<(), AuditError> {
        let path = self.dir.join(SNAPSHOT_FILE);
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let snap = Snapshot {
            seq: self.seq,
            samples: self.samples.clone(),
        };
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(
            serde_json::to_string(&snap)
                .expect("snapshot serializes")
                .as_bytes(),
        )
        .map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        self.snapshot_seq = self.seq;
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn samples(&self) -> &[AuditSample] {
        &self.samples
    }

    pub fn get(&self, sample_id: &str) -> Option<&AuditSample> {
        self.by_id.get(sample_id).map(|&i| &self.samples[i])
    }

    pub fn pending_count(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| s.status == SampleStatus::Pending)
            .count()
    }

    /// Add samples not already in the store; returns how many were added.
    pub fn add_samples(&mut self, samples: Vec<AuditSample>) -> Result<usize, AuditError> {
        let mut added = 0;
        let mut seen = HashSet::new();
        for sample in samples {
            if self.by_id.contains_key(&sample.sample_id) || !seen.insert(sample.sample_id.clone())
            {
                continue;
            }
            let event = AuditEvent::SampleAdded {
                seq: self.seq + 1,
                at_ms: now_ms(),
                sample,
            };
            self.commit(event)?;
            added += 1;
        }
        Ok(added)
    }

    /// Lease the oldest pending sample not leased to someone else. A reviewer
    /// asking again gets their current lease back.
    pub fn lease_next(
        &mut self,
        reviewer: &str,
        now: Instant,
        ttl: Duration,
    ) -> Option<AuditSample> {
        self.leases.retain(|_, l| l.expires > now);
        if let Some((id, _)) = self.leases.iter().find(|(id, l)| {
            l.reviewer == reviewer
                && self
                    .get(id)
                    .is_some_and(|s| s.status == SampleStatus::Pending)
        }) {
            let id = id.clone();
            self.leases.insert(
                id.clone(),
                Lease {
                    reviewer: reviewer.to_string(),
                    expires: now + ttl,
                },
            );
            return self.get(&id).cloned();
        }
        let sample = self
            .samples
            .iter()
            .find(|s| s.status == SampleStatus::Pending && !self.leases.contains_key(&s.sample_id))?
            .clone();
        self.leases.insert(
            sample.sample_id.clone(),
            Lease {
                reviewer: reviewer.to_string(),
                expires: now + ttl,
            },
        );
        Some(sample)
    }

    /// Record human scores. Re-scoring requires `replace` and logs the prior
    /// value in the event.
    pub fn ingest_human_score(
        &mut self,
        sample_id: &str,
        reviewer_id: &str,
        scores: HumanScores,
        replace: bool,
    ) -> Result<AuditSample, AuditError> {
        scores.validate()?;
        let sample = self
            .get(sample_id)
            .ok_or_else(|| AuditError::UnknownSample(sample_id.to_string()))?;
        let replaced = match (sample.status, replace) {
            (SampleStatus::Scored, false) => {
                return Err(AuditError::AlreadyScored(sample_id.to_string()))
            }
            (SampleStatus::Scored, true) => Some(PriorScore {
                reviewer_id: sample.reviewer_id.clone(),
                scores: sample.human_scores.expect("scored samples carry scores"),
            }),
            (SampleStatus::Pending, _) => None,
        };
        let event = AuditEvent::Scored {
            seq: self.seq + 1,
            at_ms: now_ms(),
            sample_id: sample_id.to_string(),
            reviewer_id: reviewer_id.to_string(),
            scores,
            replaced,
        };
        self.commit(event)?;
        self.leases.remove(sample_id);
        Ok(self.get(sample_id).cloned().expect("sample exists"))
    }

    /// Every event in the log, in order.
    pub fn events(&self) -> Result<Vec<AuditEvent>, AuditError> {
        let path = self.dir.join(EVENTS_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(text
            .lines()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect())
    }

    pub fn calibration_report(&self) -> Result<CalibrationReport, AuditError> {
        calibration_report(&self.samples, &RewardWeights::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub bin: ScoreBin,
    pub samples: usize,
    pub llm_mean: f64,
    pub human_mean: f64,
    /// llm_mean − human_mean.
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rows: Vec<CalibrationRow>,
    pub total_scored: usize,
    /// Pearson correlation of LLM and human totals over scored samples;
    /// absent with fewer than two samples or zero variance.
    pub correlation: Option<f64>,
}

/// Per-bin means of LLM totals and human weighted totals over scored samples.
/// Only populated bins appear, ordered low to high.
pub fn calibration_report(
    samples: &[AuditSample],
    weights: &RewardWeights,
) -> Result<CalibrationReport, AuditError> {
    let scored: Vec<(ScoreBin, f64, f64)> = samples
        .iter()
        .filter_map(|s| {
            s.human_scores
                .map(|h| (s.score_bin, s.llm_total, h.weighted_total(weights)))
        })
        .collect();
    if scored.is_empty() {
        return Err(AuditError::NoScoredSamples);
    }
    let mut bins: BTreeMap<ScoreBin, (usize, f64, f64)> = BTreeMap::new();
    for &(bin, llm, human) in &scored {
        let e = bins.entry(bin).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += llm;
        e.2 += human;
    }
    let rows = bins
        .into_iter()
        .map(|(bin, (n, llm, human))| {
            let llm_mean = llm / n as f64;
            let human_mean = human / n as f64;
            CalibrationRow {
                bin,
                samples: n,
                llm_mean,
                human_mean,
                difference: llm_mean - human_mean,
            }
        })
        .collect();
    Ok(CalibrationReport {
        rows,
        total_scored: scored.len(),
        correlation: pearson(&scored.iter().map(|s| (s.1, s.2)).collect::<Vec<_>>()),
    })
}

fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Read a pool of judged items from JSONL.
pub fn read_pool(path: &Path) -> Result<Vec<JudgedItem>, AuditError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| AuditError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
