//! Corpus construction: annotate base theorem-proof pairs into hierarchical
//! records, filter failures, drop duplicate questions and compute statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Notify;
use unicode_normalization::UnicodeNormalization;

use crate::gateway::{CompletionRequest, CompletionResponse, Gateway, GatewayError};
use crate::hierarchy::{
    parse_corpus_line, parse_hierarchical, parse_theorem_line, render_corpus_line,
    HierarchicalRecord, SchemaError, StageView, TechniqueCategory, TheoremRecord,
};
use crate::prompts::{PromptLibrary, TemplateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnnotationStatus {
    Accepted,
    ParseFailed,
    ApiFailed,
    DuplicateDropped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationOutcome {
    pub record_id: String,
    pub status: AnnotationStatus,
    pub attempts: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<HierarchicalRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_detail: Option<String>,
}

impl AnnotationOutcome {
    fn accepted(id: &str, attempts: u32, record: HierarchicalRecord) -> Self {
        Self {
            record_id: id.to_string(),
            status: AnnotationStatus::Accepted,
            attempts,
            record: Some(record),
            failure_detail: None,
        }
    }

    fn failed(id: &str, status: AnnotationStatus, attempts: u32, detail: String) -> Self {
        Self {
            record_id: id.to_string(),
            status,
            attempts,
            record: None,
            failure_detail: Some(detail),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotatorConfig {
    pub model: String,
    pub max_attempts: u32,
    pub max_in_flight: usize,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            model: "deepseek-r1".into(),
            max_attempts: 3,
            max_in_flight: 8,
            max_tokens: 8192,
            temperature: 0.0,
        }
    }
}

fn annotation_request(
    base: &TheoremRecord,
    prompts: &PromptLibrary,
    config: &AnnotatorConfig,
) -> CompletionRequest {
    let prompt = prompts
        .get(TemplateId::DataConstruction)
        .fill_pairs(&[("question", &base.question), ("response", &base.proof)])
        .expect("data construction template has question and response slots");
    CompletionRequest::single_user(&config.model, prompt)
        .with_max_tokens(config.max_tokens)
        .with_temperature(config.temperature)
}

enum AttemptResult {
    Parsed(Box<HierarchicalRecord>),
    ParseFailed(String),
    ApiFailed(String),
}

fn interpret(
    base: &TheoremRecord,
    result: Result<CompletionResponse, GatewayError>,
) -> AttemptResult {
    match result {
        Ok(resp) => match parse_hierarchical(&resp.text, StageView::Full) {
            Ok(sections) => {
                AttemptResult::Parsed(Box::new(HierarchicalRecord::new(base.clone(), sections)))
            }
            Err(e) => AttemptResult::ParseFailed(e.to_string()),
        },
        Err(e) => AttemptResult::ApiFailed(e.to_string()),
    }
}

/// Annotate one record, retrying up to `max_attempts` times on parse or API
/// failures. Failures are encoded in the outcome, never raised.
pub async fn annotate_one(
    base: &TheoremRecord,
    gateway: &Gateway,
    prompts: &PromptLibrary,
    config: &AnnotatorConfig,
) -> AnnotationOutcome {
    let max_attempts = config.max_attempts.max(1);
    let req = annotation_request(base, prompts, config);
    let mut last = AnnotationOutcome::failed(
        &base.id,
        AnnotationStatus::ApiFailed,
        0,
        "not attempted".into(),
    );
    for attempt in 1..=max_attempts {
        match interpret(base, gateway.complete(&req).await) {
            AttemptResult::Parsed(record) => {
                return AnnotationOutcome::accepted(&base.id, attempt, *record)
            }
            AttemptResult::ParseFailed(detail) => {
                last = AnnotationOutcome::failed(
                    &base.id,
                    AnnotationStatus::ParseFailed,
                    attempt,
                    detail,
                );
            }
            AttemptResult::ApiFailed(detail) => {
                last = AnnotationOutcome::failed(
                    &base.id,
                    AnnotationStatus::ApiFailed,
                    attempt,
                    detail,
                );
            }
        }
    }
    last
}

/// Question normalization used for duplicate detection: trim, collapse
/// whitespace runs to one space, NFC.
pub fn normalize_question(question: &str) -> String {
    let collapsed = question.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.nfc().collect()
}

pub fn question_key(question: &str) -> String {
    hex::encode(Sha256::digest(normalize_question(question).as_bytes()))
}

/// Keep the first record per normalized question. Returns the kept records in
/// input order and the ids of dropped ones.
pub fn dedup(
    records: impl IntoIterator<Item = HierarchicalRecord>,
) -> (Vec<HierarchicalRecord>, Vec<String>) {
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for record in records {
        if seen.insert(question_key(record.question())) {
            kept.push(record);
        } else {
            dropped.push(record.id().to_string());
        }
    }
    (kept, dropped)
}

/// Extra theorems named in a TheoremCall body: top-level `;` and standalone
/// `and` outside `$…$` math and brackets.
pub fn extra_theorem_delimiters(body: &str) -> usize {
    let mut depth = 0i32;
    let mut in_math = false;
    let mut count = 0usize;
    let chars: Vec<char> = body.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '\\' => {
                i += 2;
                continue;
            }
            '$' => in_math = !in_math,
            '(' | '[' | '{' if !in_math => depth += 1,
            ')' | ']' | '}' if !in_math => depth = (depth - 1).max(0),
            ';' if !in_math && depth == 0 => count += 1,
            'a' | 'A' if !in_math && depth == 0 => {
                let word: String = chars[i..chars.len().min(i + 3)].iter().collect();
                let before_ok = i == 0 || !chars[i - 1].is_alphanumeric();
                let after_ok = chars.get(i + 3).is_none_or(|c| !c.is_alphanumeric());
                if word.eq_ignore_ascii_case("and") && before_ok && after_ok {
                    count += 1;
                }
            }
            _ => {}
        }
        i += 1;
    }
    // A trailing delimiter does not introduce another theorem.
    let trimmed = body.trim_end_matches(|c: char| c.is_whitespace() || c == '.');
    if !in_math && trimmed.ends_with(';') {
        count = count.saturating_sub(1);
    }
    count
}

/// Techniques in a record counting one per present category.
pub fn technique_count(record: &HierarchicalRecord) -> usize {
    record.sections.insight().map_or(0, |b| b.present_count())
}

/// Technique count that also splits TheoremCall bodies naming several theorems.
pub fn extended_technique_count(record: &HierarchicalRecord) -> usize {
    let Some(block) = record.sections.insight() else {
        return 0;
    };
    let extra = block
        .technique(TechniqueCategory::TheoremCall)
        .as_text()
        .map_or(0, extra_theorem_delimiters);
    block.present_count() + extra
}

/// Description normalization for the top-technique lists.
pub fn normalize_description(text: &str) -> String {
    let lowered = normalize_question(text).to_lowercase();
    lowered.trim_end_matches(['.', ';', ',', ' ']).to_string()
}

pub const TOP_TECHNIQUES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub record_count: usize,
    pub technique_count_histogram: BTreeMap<usize, usize>,
    pub mean_techniques: f64,
    pub extended_technique_count_histogram: BTreeMap<usize, usize>,
    pub mean_techniques_extended: f64,
    pub per_category_counts: BTreeMap<String, usize>,
    pub top_techniques_per_category: BTreeMap<String, Vec<(String, usize)>>,
    pub records_without_insight: usize,
}

fn histogram_mean(hist: &BTreeMap<usize, usize>, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    hist.iter().map(|(k, c)| (*k * *c) as f64).sum::<f64>() / n as f64
}

pub fn compute_stats<'a>(records: impl IntoIterator<Item = &'a HierarchicalRecord>) -> CorpusStats {
    let mut record_count = 0;
    let mut hist = BTreeMap::new();
    let mut ext_hist = BTreeMap::new();
    let mut per_category: BTreeMap<String, usize> = TechniqueCategory::ALL
        .iter()
        .map(|c| (c.json_key().to_string(), 0))
        .collect();
    let mut descriptions: HashMap<TechniqueCategory, HashMap<String, usize>> = HashMap::new();
    let mut without_insight = 0;
    for record in records {
        record_count += 1;
        *hist.entry(technique_count(record)).or_insert(0) += 1;
        *ext_hist
            .entry(extended_technique_count(record))
            .or_insert(0) += 1;
        let Some(block) = record.sections.insight() else {
            without_insight += 1;
            continue;
        };
        for category in TechniqueCategory::ALL {
            if let Some(text) = block.technique(category).as_text() {
                *per_category.get_mut(category.json_key()).expect("seeded") += 1;
                *descriptions
                    .entry(category)
                    .or_default()
                    .entry(normalize_description(text))
                    .or_insert(0) += 1;
            }
        }
    }
    let top_techniques_per_category = TechniqueCategory::ALL
        .iter()
        .map(|c| {
            let mut ranked: Vec<(String, usize)> = descriptions
                .remove(c)
                .unwrap_or_default()
                .into_iter()
                .collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            ranked.truncate(TOP_TECHNIQUES);
            (c.json_key().to_string(), ranked)
        })
        .collect();
    CorpusStats {
        record_count,
        mean_techniques: histogram_mean(&hist, record_count),
        mean_techniques_extended: histogram_mean(&ext_hist, record_count),
        technique_count_histogram: hist,
        extended_technique_count_histogram: ext_hist,
        per_category_counts: per_category,
        top_techniques_per_category,
        records_without_insight: without_insight,
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {source}")]
    Input {
        line: usize,
        #[source]
        source: SchemaError,
    },
    #[error("duplicate id `{0}` in base corpus")]
    DuplicateId(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cancelled; partial output written to {0}")]
    Cancelled(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Read base-corpus JSONL. Blank lines are skipped; ids must be unique.
pub fn read_base_corpus(path: &Path) -> Result<Vec<TheoremRecord>, PipelineError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_theorem_line(&line).map_err(|source| PipelineError::Input {
            line: i + 1,
            source,
        })?;
        if !ids.insert(record.id.clone()) {
            return Err(PipelineError::DuplicateId(record.id));
        }
        out.push(record);
    }
    Ok(out)
}

/// Per-line result of reading a corpus file.
#[derive(Debug)]
pub struct CorpusScan {
    pub records: Vec<HierarchicalRecord>,
    /// 1-based line number and error for every invalid line.
    pub errors: Vec<(usize, String)>,
    pub lines: usize,
}

/// Parse every non-blank line of a corpus file, collecting per-line errors
/// (schema violations, Full-view parse failures, duplicate ids).
pub fn scan_corpus(path: &Path) -> Result<CorpusScan, PipelineError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut scan = CorpusScan {
        records: Vec::new(),
        errors: Vec::new(),
        lines: 0,
    };
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        scan.lines += 1;
        match parse_corpus_line(&line) {
            Ok(record) if !ids.insert(record.id().to_string()) => {
                scan.errors
                    .push((i + 1, format!("duplicate id `{}`", record.id())));
            }
            Ok(record) => scan.records.push(record),
            Err(e) => scan.errors.push((i + 1, e.to_string())),
        }
    }
    Ok(scan)
}

/// Read a corpus file, failing on the first invalid line.
pub fn read_corpus(path: &Path) -> Result<Vec<HierarchicalRecord>, PipelineError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            parse_corpus_line(&line).map_err(|source| PipelineError::Input {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

/// Shared cancellation flag for long-running operations.
#[derive(Debug, Clone, Default)]
pub struct Cancellation {
    inner: Arc<(AtomicBool, Notify)>,
}

impl Cancellation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.inner.0.store(true, Ordering::SeqCst);
        self.inner.1.notify_waiters();
    }

    pub fn is_cancelled(&self) -> bool {
        self.inner.0.load(Ordering::SeqCst)
    }

    pub async fn cancelled(&self) {
        loop {
            let notified = self.inner.1.notified();
            if self.is_cancelled() {
                return;
            }
            notified.await;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub record_id: String,
    pub status: AnnotationStatus,
    pub attempts: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub model: String,
    pub max_attempts: u32,
    pub prompt_id: TemplateId,
    pub prompt_digest: String,
    pub total: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub failure_breakdown: BTreeMap<AnnotationStatus, usize>,
    pub proofs_revised: usize,
    pub stats: CorpusStats,
    pub outcomes: Vec<OutcomeSummary>,
}

/// Path of the partial output written when a run is cancelled.
pub fn partial_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".partial");
    PathBuf::from(name)
}

/// Path of the report written next to the corpus file.
pub fn report_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".report.json");
    PathBuf::from(name)
}

/// Annotate every base record with bounded concurrency, then dedup and
/// compute stats. Failed items are retried in rounds until they parse or run
/// out of attempts. Output order follows input order.
pub async fn annotate_all(
    base: &[TheoremRecord],
    gateway: &Gateway,
    prompts: &PromptLibrary,
    config: &AnnotatorConfig,
    cancel: Option<&Cancellation>,
) -> (Vec<AnnotationOutcome>, bool) {
    let max_attempts = config.max_attempts.max(1);
    let mut outcomes: Vec<AnnotationOutcome> = base
        .iter()
        .map(|b| {
            AnnotationOutcome::failed(
                &b.id,
                AnnotationStatus::ApiFailed,
                0,
                "not attempted".into(),
            )
        })
        .collect();
    let mut pending: Vec<usize> = (0..base.len()).collect();
    let mut cancelled = false;
    for attempt in 1..=max_attempts {
        if pending.is_empty() {
            break;
        }
        let n = config.max_in_flight.max(1);
        let mut results = stream::iter(pending.iter().map(|&i| {
            let req = annotation_request(&base[i], prompts, config);
            async move { (i, gateway.complete(&req).await) }
        }))
        .buffer_unordered(n);
        let mut still_pending = Vec::new();
        loop {
            // Results are folded in as they arrive so a cancellation keeps
            // every record finished so far.
            let next = match cancel {
                Some(c) => tokio::select! {
                    r = results.next() => r,
                    _ = c.cancelled() => { cancelled = true; break; }
                },
                None => results.next().await,
            };
            let Some((i, result)) = next else { break };
            let id = &base[i].id;
            outcomes[i] = match interpret(&base[i], result) {
                AttemptResult::Parsed(record) => AnnotationOutcome::accepted(id, attempt, *record),
                AttemptResult::ParseFailed(d) => {
                    still_pending.push(i);
                    AnnotationOutcome::failed(id, AnnotationStatus::ParseFailed, attempt, d)
                }
                AttemptResult::ApiFailed(d) => {
                    still_pending.push(i);
                    AnnotationOutcome::failed(id, AnnotationStatus::ApiFailed, attempt, d)
                }
            };
        }
        drop(results);
        if cancelled {
            break;
        }
        still_pending.sort_unstable();
        pending = still_pending;
    }
    (outcomes, cancelled)
}

fn write_corpus(path: &Path, records: &[HierarchicalRecord]) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    for r in records {
        buf.extend_from_slice(render_corpus_line(r).as_bytes());
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&buf).map_err(io_err(path))?;
    file.sync_all().map_err(io_err(path))
}

/// Full pipeline from a base JSONL file to a corpus JSONL file plus a report
/// JSON (written to [`report_path`]). On cancellation the accepted records so
/// far go to [`partial_path`].
pub async fn run_pipeline(
    base_path: &Path,
    out_path: &Path,
    gateway: &Gateway,
    prompts: &PromptLibrary,
    config: &AnnotatorConfig,
    cancel: Option<&Cancellation>,
) -> Result<AnnotationReport, PipelineError> {
    if config.max_in_flight == 0 || config.max_attempts == 0 {
        return Err(PipelineError::Config(
            "max_in_flight and max_attempts must be at least 1".into(),
        ));
    }
    if config.model.trim().is_empty() {
        return Err(PipelineError::Config("model must be set".into()));
    }
    let base = read_base_corpus(base_path)?;
    let (outcomes, cancelled) = annotate_all(&base, gateway, prompts, config, cancel).await;
    let (report, kept) = summarize(&outcomes, prompts, config);
    if cancelled {
        let partial = partial_path(out_path);
        write_corpus(&partial, &kept)?;
        return Err(PipelineError::Cancelled(partial));
    }
    write_corpus(out_path, &kept)?;
    let report_file = report_path(out_path);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&report_file, json + "\n").map_err(io_err(&report_file))?;
    Ok(report)
}

/// Dedup accepted records, mark dropped duplicates and build the report.
pub fn summarize(
    outcomes: &[AnnotationOutcome],
    prompts: &PromptLibrary,
    config: &AnnotatorConfig,
) -> (AnnotationReport, Vec<HierarchicalRecord>) {
    let accepted: Vec<HierarchicalRecord> =
        outcomes.iter().filter_map(|o| o.record.clone()).collect();
    let (kept, dropped) = dedup(accepted);
    let dropped: HashSet<&str> = dropped.iter().map(String::as_str).collect();
    let mut summaries = Vec::with_capacity(outcomes.len());
    let mut breakdown = BTreeMap::new();
    for o in outcomes {
        let status = if dropped.contains(o.record_id.as_str()) {
            AnnotationStatus::DuplicateDropped
        } else {
            o.status
        };
        if status != AnnotationStatus::Accepted {
            *breakdown.entry(status).or_insert(0) += 1;
        }
        summaries.push(OutcomeSummary {
            record_id: o.record_id.clone(),
            status,
            attempts: o.attempts,
            failure_detail: o.failure_detail.clone(),
        });
    }
    let total = outcomes.len();
    let template = prompts.get(TemplateId::DataConstruction);
    let report = AnnotationReport {
        model: config.model.clone(),
        max_attempts: config.max_attempts,
        prompt_id: TemplateId::DataConstruction,
        prompt_digest: template.digest().to_string(),
        total,
        accepted: kept.len(),
        acceptance_rate: if total == 0 {
            0.0
        } else {
            kept.len() as f64 / total as f64
        },
        failure_breakdown: breakdown,
        proofs_revised: kept.iter().filter(|r| r.proof_was_revised()).count(),
        stats: compute_stats(&kept),
        outcomes: summaries,
    };
    (report, kept)
}
