//! LLM-as-judge evaluation: per-proof scoring on validity, completeness and
//! clarity, multi-judge aggregation, benchmark runs and the categorical
//! insightfulness evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use futures::stream::{self, StreamExt};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::proof_component;
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::prompts::{PromptLibrary, TemplateId};
use crate::textutil;

pub const VALIDITY_WEIGHT: f64 = 0.4;
pub const COMPLETENESS_WEIGHT: f64 = 0.3;
pub const CLARITY_WEIGHT: f64 = 0.3;

/// Literal totals further than this from the recomputed total are flagged.
pub const MISMATCH_TOLERANCE: f64 = 0.005;

pub fn judge_total(validity: f64, completeness: f64, clarity: f64) -> f64 {
    VALIDITY_WEIGHT * validity + COMPLETENESS_WEIGHT * completeness + CLARITY_WEIGHT * clarity
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge output could not be parsed: {0}")]
    UnparseableVerdict(String),
    #[error("insight labels could not be parsed: {0}")]
    UnparseableLabels(String),
    #[error("no verdicts to aggregate")]
    EmptyVerdictList,
    #[error("proof is empty")]
    EmptyProof,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanations {
    pub validity: String,
    pub completeness: String,
    pub clarity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub judge_id: String,
    pub validity: f64,
    pub completeness: f64,
    pub clarity: f64,
    /// Recomputed from the sub-scores; authoritative.
    pub total: f64,
    /// The number the judge wrote in `<score>`, if any.
    pub literal_total: Option<f64>,
    pub total_mismatch: bool,
    pub explanations: Explanations,
}

fn explanation_after(exp: &str, anchor_at: usize) -> String {
    let rest = &exp[anchor_at..];
    let Some(pos) = rest.to_ascii_lowercase().find("explanation:") else {
        return String::new();
    };
    let body = &rest[pos + "explanation:".len()..];
    let end = body.find("\n\"").unwrap_or(body.len());
    body[..end].trim().to_string()
}

fn sub_score(exp: &str, name: &str) -> Option<(f64, String)> {
    let lower = exp.to_ascii_lowercase();
    for anchor in [format!("\"{name}\""), format!("{name}:")] {
        if let Some(at) = lower.find(&anchor) {
            let value = textutil::number_after(exp, &anchor)?;
            if !(0.0..=1.0).contains(&value) {
                return None;
            }
            return Some((value, explanation_after(exp, at + anchor.len())));
        }
    }
    None
}

/// Parse a judge response in the `<score>…</score><exp>…</exp>` format.
pub fn parse_verdict(judge_id: &str, text: &str) -> Result<JudgeVerdict, JudgeError> {
    let literal_total = textutil::extract_block(text, "score").and_then(textutil::first_number);
    let exp = textutil::extract_block(text, "exp").unwrap_or(text);
    let mut scores = Vec::with_capacity(3);
    for name in ["validity", "completeness", "clarity"] {
        match sub_score(exp, name) {
            Some(s) => scores.push(s),
            None => {
                return Err(JudgeError::UnparseableVerdict(format!(
                    "missing or invalid `{name}` sub-score"
                )));
            }
        }
    }
    let [(validity, ev), (completeness, eco), (clarity, ecl)]: [(f64, String); 3] =
        scores.try_into().expect("three sub-scores");
    let total = judge_total(validity, completeness, clarity);
    let total_mismatch = literal_total.is_some_and(|l| (l - total).abs() > MISMATCH_TOLERANCE);
    Ok(JudgeVerdict {
        judge_id: judge_id.to_string(),
        validity,
        completeness,
        clarity,
        total,
        literal_total,
        total_mismatch,
        explanations: Explanations {
            validity: ev,
            completeness: eco,
            clarity: ecl,
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub max_tokens: u32,
    pub temperature: f64,
    /// Extra calls after an unparseable verdict.
    pub parse_retries: u32,
    pub max_in_flight: usize,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            max_tokens: 4096,
            temperature: 0.0,
            parse_retries: 1,
            max_in_flight: 8,
        }
    }
}

/// Score one proof with one judge model. An unparseable response is retried
/// `parse_retries` times before giving up.
pub async fn judge_proof(
    question: &str,
    proof: &str,
    judge_model: &str,
    gateway: &Gateway,
    prompts: &PromptLibrary,
    config: &JudgeConfig,
) -> Result<JudgeVerdict, JudgeError> {
    if proof.trim().is_empty() {
        return Err(JudgeError::EmptyProof);
    }
    let prompt = prompts
        .get(TemplateId::ProofEvaluation)
        .fill_pairs(&[("question", question), ("response", proof)])
        .expect("proof evaluation template has question and response slots");
    let req = CompletionRequest::single_user(judge_model, prompt)
        .with_max_tokens(config.max_tokens)
        .with_temperature(config.temperature);
    let mut last_error = None;
    for _ in 0..=config.parse_retries {
        let resp = gateway.complete(&req).await?;
        match parse_verdict(judge_model, &resp.text) {
            Ok(v) => return Ok(v),
            Err(e) => last_error = Some(e),
        }
    }
    Err(last_error.expect("at least one attempt"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedVerdict {
    pub verdicts: Vec<JudgeVerdict>,
    pub mean_total: f64,
    pub mean_validity: f64,
    pub mean_completeness: f64,
    pub mean_clarity: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

pub fn aggregate(verdicts: Vec<JudgeVerdict>) -> Result<AggregatedVerdict, JudgeError> {
    if verdicts.is_empty() {
        return Err(JudgeError::EmptyVerdictList);
    }
    Ok(AggregatedVerdict {
        mean_total: mean(verdicts.iter().map(|v| v.total)),
        mean_validity: mean(verdicts.iter().map(|v| v.validity)),
        mean_completeness: mean(verdicts.iter().map(|v| v.completeness)),
        mean_clarity: mean(verdicts.iter().map(|v| v.clarity)),
        verdicts,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkName {
    Fimo,
    Putnam,
    Hmmt,
    Custom(String),
}

impl BenchmarkName {
    /// Recognizes `fimo`, `putnam` and `hmmt` (case-insensitive); anything
    /// else is a custom benchmark.
    pub fn parse(name: &str) -> Self {
        match name.to_ascii_lowercase().as_str() {
            "fimo" => BenchmarkName::Fimo,
            "putnam" => BenchmarkName::Putnam,
            "hmmt" => BenchmarkName::Hmmt,
            _ => BenchmarkName::Custom(name.to_string()),
        }
    }

    /// Number of questions in the full benchmark.
    pub fn expected_count(&self) -> Option<usize> {
        match self {
            BenchmarkName::Fimo => Some(71),
            BenchmarkName::Putnam => Some(166),
            BenchmarkName::Hmmt => Some(76),
            BenchmarkName::Custom(_) => None,
        }
    }
}

impl fmt::Display for BenchmarkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchmarkName::Fimo => f.write_str("FIMO"),
            BenchmarkName::Putnam => f.write_str("Putnam"),
            BenchmarkName::Hmmt => f.write_str("HMMT"),
            BenchmarkName::Custom(name) => f.write_str(name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: BenchmarkName,
    pub items: Vec<BenchmarkItem>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProofLine {
    id: String,
    proof: String,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), i + 1),
            )
        })?;
        out.push(value);
    }
    Ok(out)
}

impl BenchmarkSpec {
    /// Load `{"id","question"}` lines.
    pub fn load(path: &Path, name: BenchmarkName) -> io::Result<Self> {
        Ok(Self {
            name,
            items: read_jsonl(path)?,
        })
    }

    /// Whether the item count matches the published benchmark size.
    pub fn is_complete(&self) -> Option<bool> {
        self.name.expected_count().map(|n| n == self.items.len())
    }
}

/// Load `{"id","proof"}` lines into a map.
pub fn load_proof_source(path: &Path) -> io::Result<HashMap<String, String>> {
    let lines: Vec<ProofLine> = read_jsonl(path)?;
    Ok(lines.into_iter().map(|l| (l.id, l.proof)).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ItemFlag {
    MissingProof,
    JudgeFailed { judge: String, message: String },
    TotalMismatch { judge: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    /// Mean over successful judges, or 0 when none succeeded.
    pub score: f64,
    pub aggregate: Option<AggregatedVerdict>,
    pub flags: Vec<ItemFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub benchmark: String,
    pub expected_count: Option<usize>,
    pub item_count: usize,
    pub judges: Vec<String>,
    pub mean: f64,
    pub max: f64,
    pub per_judge_mean: BTreeMap<String, f64>,
    pub mismatch_rate: f64,
    pub failed_judgements: usize,
    pub items: Vec<ItemResult>,
}

/// Judge every item with every judge. Hierarchical proof texts are reduced
/// to their `<proof>` body first. Always produces a report.
pub async fn run_benchmark(
    spec: &BenchmarkSpec,
    proofs: &HashMap<String, String>,
    judges: &[String],
    gateway: &Gateway,
    prompts: &PromptLibrary,
    config: &JudgeConfig,
) -> BenchmarkReport {
    let jobs: Vec<(usize, &str, &str, &str)> = spec
        .items
        .iter()
        .enumerate()
        .filter_map(|(i, item)| proofs.get(&item.id).map(|p| (i, item, proof_component(p))))
        .filter(|(_, _, p)| !p.is_empty())
        .flat_map(|(i, item, proof)| {
            judges
                .iter()
                .map(move |j| (i, item.question.as_str(), proof, j.as_str()))
        })
        .collect();
    let results: Vec<(usize, String, Result<JudgeVerdict, JudgeError>)> = stream::iter(jobs)
        .map(|(i, question, proof, judge)| async move {
            let r = judge_proof(question, proof, judge, gateway, prompts, config).await;
            (i, judge.to_string(), r)
        })
        .buffer_unordered(config.max_in_flight.max(1))
        .collect()
        .await;

    let mut per_item: Vec<(Vec<JudgeVerdict>, Vec<ItemFlag>)> =
        vec![(Vec::new(), Vec::new()); spec.items.len()];
    let mut failed = 0;
    for (i, judge, result) in results {
        match result {
            Ok(v) => per_item[i].0.push(v),
            Err(e) => {
                failed += 1;
                per_item[i].1.push(ItemFlag::JudgeFailed {
                    judge,
                    message: e.to_string(),
                })
            }
        }
    }

    let judge_order: HashMap<&str, usize> = judges
        .iter()
        .enumerate()
        .map(|(k, j)| (j.as_str(), k))
        .collect();
    let mut items = Vec::with_capacity(spec.items.len());
    let mut judge_totals: HashMap<String, (f64, usize)> = HashMap::new();
    let (mut verdict_count, mut mismatches) = (0usize, 0usize);
    for (item, (mut verdicts, mut flags)) in spec.items.iter().zip(per_item) {
        let has_proof = proofs
            .get(&item.id)
            .is_some_and(|p| !proof_component(p).is_empty());
        if !has_proof {
            flags.push(ItemFlag::MissingProof);
        }
        verdicts.sort_by_key(|v| {
            judge_order
                .get(v.judge_id.as_str())
                .copied()
                .unwrap_or(usize::MAX)
        });
        flags.sort_by(|a, b| format!("{a:?}").cmp(&format!("{b:?}")));
        for v in &verdicts {
            verdict_count += 1;
            let entry = judge_totals.entry(v.judge_id.clone()).or_insert((0.0, 0));
            entry.0 += v.total;
            entry.1 += 1;
            if v.total_mismatch {
                mismatches += 1;
                flags.push(ItemFlag::TotalMismatch {
                    judge: v.judge_id.clone(),
                });
            }
        }
        let aggregate = aggregate(verdicts).ok();
        items.push(ItemResult {
            id: item.id.clone(),
            score: aggregate.as_ref().map_or(0.0, |a| a.mean_total),
            aggregate,
            flags,
        });
    }
    let n = items.len();
    BenchmarkReport {
        benchmark: spec.name.to_string(),
        expected_count: spec.name.expected_count(),
        item_count: n,
        judges: judges.to_vec(),
        mean: if n == 0 {
            0.0
        } else {
            items.iter().map(|i| i.score).sum::<f64>() / n as f64
        },
        max: items.iter().map(|i| i.score).fold(0.0, f64::max),
        per_judge_mean: judge_totals
            .into_iter()
            .map(|(j, (s, c))| (j, s / c as f64))
            .collect(),
        mismatch_rate: if verdict_count == 0 {
            0.0
        } else {
            mismatches as f64 / verdict_count as f64
        },
        failed_judgements: failed,
        items,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Depth {
    DeepIdentification,
    ShallowQuickGuess,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expression {
    DetailedExpression,
    SimpleScratch,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    Comprehensive,
    Incomplete,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsightVerdict {
    pub depth: Depth,
    pub expression: Expression,
    pub coverage: Coverage,
}

const DEPTH_LABELS: &[(&str, u8)] = &[
    ("deep identification", 0),
    ("shallow quick guess", 1),
    ("mixed", 2),
];
const EXPRESSION_LABELS: &[(&str, u8)] = &[
    ("detailed expression", 0),
    ("accurate expression", 0),
    ("simple scratch", 1),
    ("mixed", 2),
];
const COVERAGE_LABELS: &[(&str, u8)] = &[("comprehensive", 0), ("incomplete", 1), ("mixed", 2)];

fn label_regex(labels: &[(&str, u8)]) -> String {
    labels
        .iter()
        .map(|(l, _)| l.replace(' ', r"\s+"))
        .collect::<Vec<_>>()
        .join("|")
}

fn label_code(labels: &[(&str, u8)], found: &str) -> u8 {
    let normalized = found
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    labels
        .iter()
        .find(|(l, _)| *l == normalized)
        .map(|(_, c)| *c)
        .expect("regex alternatives come from the label table")
}

/// Labels after explicit `1.` / `2.` / `3.` markers.
fn numbered_labels(text: &str) -> Option<[u8; 3]> {
    let mut out = [0u8; 3];
    for (k, labels) in [DEPTH_LABELS, EXPRESSION_LABELS, COVERAGE_LABELS]
        .into_iter()
        .enumerate()
    {
        let pattern = format!(
            r#"(?is)(?:^|[^\d.]){}\s*[.):]\s*[\s'"*`\\{{}}]*(?:textbf\{{)?\s*({})"#,
            k + 1,
            label_regex(labels)
        );
        let re = Regex::new(&pattern).expect("valid label regex");
        let m = re.captures(text)?;
        out[k] = label_code(labels, m.get(1)?.as_str());
    }
    Some(out)
}

/// Labels in order of appearance: depth first, then expression, then coverage.
fn sequential_labels(text: &str) -> Option<[u8; 3]> {
    let mut out = [0u8; 3];
    let mut from = 0;
    for (k, labels) in [DEPTH_LABELS, EXPRESSION_LABELS, COVERAGE_LABELS]
        .into_iter()
        .enumerate()
    {
        let re =
            Regex::new(&format!(r"(?i)\b({})\b", label_regex(labels))).expect("valid label regex");
        let m = re.find(&text[from..])?;
        out[k] = label_code(labels, m.as_str());
        from += m.end();
    }
    Some(out)
}

/// Parse the three categorical labels of an insight evaluation. Numbered
/// answers are preferred; otherwise labels are read in order of appearance.
pub fn parse_insight_labels(text: &str) -> Result<InsightVerdict, JudgeError> {
    let codes = numbered_labels(text)
        .or_else(|| sequential_labels(text))
        .ok_or_else(|| JudgeError::UnparseableLabels("expected three labels".into()))?;
    Ok(InsightVerdict {
        depth: [
            Depth::DeepIdentification,
            Depth::ShallowQuickGuess,
            Depth::Mixed,
        ][codes[0] as usize],
        expression: [
            Expression::DetailedExpression,
            Expression::SimpleScratch,
            Expression::Mixed,
        ][codes[1] as usize],
        coverage: [
            Coverage::Comprehensive,
            Coverage::Incomplete,
            Coverage::Mixed,
        ][codes[2] as usize],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightEvaluation {
    pub candidate_model: String,
    pub judge_model: String,
    pub insight: String,
    pub verdict: InsightVerdict,
    pub grader_output: String,
}

/// Ask `candidate_model` for a quick insight, then grade it with `judge_model`.
pub async fn evaluate_insightfulness(
    question: &str,
    judge_model: &str,
    candidate_model: &str,
    gateway: &Gateway,
    prompts: &PromptLibrary,
    config: &JudgeConfig,
) -> Result<InsightEvaluation, JudgeError> {
    let gen_prompt = prompts
        .get(TemplateId::InsightGeneration)
        .fill_pairs(&[("question", question)])
        .expect("insight generation template has a question slot");
    let gen = CompletionRequest::single_user(candidate_model, gen_prompt)
        .with_max_tokens(config.max_tokens)
        .with_temperature(config.temperature);
    let insight = gateway.complete(&gen).await?.text;
    let eval_prompt = prompts
        .get(TemplateId::InsightEvaluation)
        .fill_pairs(&[("question", question), ("insight", &insight)])
        .expect("insight evaluation template has question and insight slots");
    let eval = CompletionRequest::single_user(judge_model, eval_prompt)
        .with_max_tokens(config.max_tokens)
        .with_temperature(config.temperature);
    let grader_output = gateway.complete(&eval).await?.text;
    let verdict = parse_insight_labels(&grader_output)?;
    Ok(InsightEvaluation {
        candidate_model: candidate_model.to_string(),
        judge_model: judge_model.to_string(),
        insight,
        verdict,
        grader_output,
    })
}

/// Judge output in the proof-evaluation format, used by fixtures and mocks.
pub fn judge_output(literal_total: f64, validity: f64, completeness: f64, clarity: f64) -> String {
    format!(
        "<score>\n{literal_total}\n</score>\n<exp>\n\"validity\": {validity}\nexplanation: scripted\n\"completeness\": {completeness}\nexplanation: scripted\n\"clarity\": {clarity}\nexplanation: scripted\n</exp>"
    )
}
