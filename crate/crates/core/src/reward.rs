//! Verifier-based rewards for hierarchical proofs.
//!
//! The verifier scores four dimensions on the grid {0, 0.1, …, 1.0}. Rather
//! than trusting the sampled score token, each dimension score is the
//! expectation Σ pᵢ·(i/10) under the softmax of the logprobs of the 11 grid
//! tokens at the score position. Dimension scores are combined with fixed
//! weights into a raw total, which is also snapped to the grid for reporting.
//! Raw totals of a rollout group are standardized into group-relative
//! advantages (population std, no KL term).

use std::collections::HashMap;
use std::fmt;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CompletionRequest, Gateway, TokenLogprobs, SCORE_TOP_LOGPROBS};
use crate::prompts::{PromptLibrary, TemplateId};
use crate::textutil;

pub const GRID_SIZE: usize = 11;

/// Advantages are all zero when the reward std falls below this.
pub const STD_EPSILON: f64 = 1e-8;

/// Logit assigned to grid values missing from the provider's top-k list,
/// relative to the smallest observed logprob.
pub const MISSING_LOGIT_OFFSET: f64 = 10.0;

/// Grid value at index `i`.
pub fn grid_value(i: usize) -> f64 {
    debug_assert!(i < GRID_SIZE);
    i as f64 / 10.0
}

/// Index of the nearest grid value; exact halves round up.
pub fn snap_to_grid(x: f64) -> usize {
    let scaled = (x.clamp(0.0, 1.0) * 10.0 + 0.5 + 1e-9).floor();
    (scaled as usize).min(GRID_SIZE - 1)
}

/// Grid index for a score token such as `0.7`, `1`, `1.0`, `0.70`.
pub fn canonical_grid_index(token: &str) -> Option<usize> {
    let t = token.trim().trim_matches(|c| c == '"' || c == '\'');
    let bytes = t.as_bytes();
    if bytes.is_empty() || !matches!(bytes[0], b'0' | b'1') {
        return None;
    }
    if bytes.len() > 1
        && (bytes[1] != b'.' || bytes.len() == 2 || !bytes[2..].iter().all(u8::is_ascii_digit))
    {
        return None;
    }
    let value: f64 = t.parse().ok()?;
    let index = (value * 10.0).round();
    if (value * 10.0 - index).abs() > 1e-9 || !(0.0..=10.0).contains(&index) {
        return None;
    }
    Some(index as usize)
}

/// Whether a token can start a grid value (`0`, `1`, `0.`, `0.7`, …).
fn begins_grid_value(token: &str) -> bool {
    let t = token.trim();
    canonical_grid_index(t).is_some() || t == "0." || t == "1."
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewardError {
    #[error("logits must be finite")]
    NonFiniteInput,
    #[error("dimension {dimension} = {value} is outside [0, 1]")]
    OutOfRangeDimension { dimension: Dimension, value: String },
    #[error("no score found for {0}")]
    NoScoreFound(Dimension),
    #[error("weights must be non-negative and sum to 1")]
    InvalidWeights,
    #[error("not a probability distribution: {0}")]
    InvalidDistribution(String),
}

/// Probabilities over the 11 grid values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution([f64; GRID_SIZE]);

impl ScoreDistribution {
    pub fn new(p: [f64; GRID_SIZE]) -> Result<Self, RewardError> {
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(RewardError::InvalidDistribution(
                "entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(RewardError::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Self(p))
    }

    pub fn uniform() -> Self {
        Self([1.0 / GRID_SIZE as f64; GRID_SIZE])
    }

    pub fn delta(index: usize) -> Self {
        let mut p = [0.0; GRID_SIZE];
        p[index.min(GRID_SIZE - 1)] = 1.0;
        Self(p)
    }

    pub fn probabilities(&self) -> &[f64; GRID_SIZE] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..GRID_SIZE {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Overflow-safe softmax of 11 logits.
pub fn distribution_from_logits(
    logits: &[f64; GRID_SIZE],
) -> Result<ScoreDistribution, RewardError> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(RewardError::NonFiniteInput);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; GRID_SIZE];
    let mut sum = 0.0;
    for (out, &l) in p.iter_mut().zip(logits) {
        *out = (l - max).exp();
        sum += *out;
    }
    for out in &mut p {
        *out /= sum;
    }
    Ok(ScoreDistribution(p))
}

/// Probability-weighted score Σ pᵢ·(i/10).
pub fn expected_score(dist: &ScoreDistribution) -> f64 {
    dist.0
        .iter()
        .enumerate()
        .map(|(i, p)| p * grid_value(i))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    InsightQuality,
    LogicalValidity,
    Completeness,
    Clarity,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::InsightQuality,
        Dimension::LogicalValidity,
        Dimension::Completeness,
        Dimension::Clarity,
    ];

    /// Text preceding the sub-score in the verifier's output format.
    pub fn anchor(self) -> &'static str {
        match self {
            Dimension::InsightQuality => "\"insight_quality\":",
            Dimension::LogicalValidity => "\"logical_validity\":",
            Dimension::Completeness => "\"completeness\":",
            Dimension::Clarity => "\"clarity\":",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimension::InsightQuality => "insight_quality",
            Dimension::LogicalValidity => "logical_validity",
            Dimension::Completeness => "completeness",
            Dimension::Clarity => "clarity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub insight: f64,
    pub validity: f64,
    pub completeness: f64,
    pub clarity: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            insight: 0.30,
            validity: 0.30,
            completeness: 0.25,
            clarity: 0.15,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        let w = [self.insight, self.validity, self.completeness, self.clarity];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0)
            || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(RewardError::InvalidWeights);
        }
        Ok(())
    }

    pub fn weight(&self, dimension: Dimension) -> f64 {
        match dimension {
            Dimension::InsightQuality => self.insight,
            Dimension::LogicalValidity => self.validity,
            Dimension::Completeness => self.completeness,
            Dimension::Clarity => self.clarity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionScores {
    pub insight_quality: f64,
    pub logical_validity: f64,
    pub completeness: f64,
    pub clarity: f64,
}

impl DimensionScores {
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

    pub fn get(&self, dimension: Dimension) -> f64 {
        match dimension {
            Dimension::InsightQuality => self.insight_quality,
            Dimension::LogicalValidity => self.logical_validity,
            Dimension::Completeness => self.completeness,
            Dimension::Clarity => self.clarity,
        }
    }

    fn set(&mut self, dimension: Dimension, value: f64) {
        match dimension {
            Dimension::InsightQuality => self.insight_quality = value,
            Dimension::LogicalValidity => self.logical_validity = value,
            Dimension::Completeness => self.completeness = value,
            Dimension::Clarity => self.clarity = value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    LogprobWeighted,
    ArgmaxFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub dimensions: DimensionScores,
    pub raw_total: f64,
    pub snapped_total: f64,
    /// `ArgmaxFallback` if any dimension fell back to its literal score.
    pub extraction_mode: ExtractionMode,
    /// The verifier's own `<score>` value, kept for drift monitoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier_literal_total: Option<f64>,
}

const RANGE_SLACK: f64 = 1e-9;

/// Weighted sum of the four dimension scores, plus its grid-snapped value.
pub fn weighted_total(
    dims: DimensionScores,
    weights: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    weights.validate()?;
    let mut clamped = dims;
    for dimension in Dimension::ALL {
        let v = dims.get(dimension);
        if !v.is_finite() || !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&v) {
            return Err(RewardError::OutOfRangeDimension {
                dimension,
                value: v.to_string(),
            });
        }
        clamped.set(dimension, v.clamp(0.0, 1.0));
    }
    let raw_total = Dimension::ALL
        .iter()
        .map(|&d| weights.weight(d) * clamped.get(d))
        .sum::<f64>();
    Ok(RewardBreakdown {
        dimensions: clamped,
        raw_total,
        snapped_total: grid_value(snap_to_grid(raw_total)),
        extraction_mode: ExtractionMode::LogprobWeighted,
        verifier_literal_total: None,
    })
}

/// Group-relative advantages `(r - mean) / std` with population std.
/// A degenerate group (std below [`STD_EPSILON`]) gets all-zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_EPSILON {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub question_id: String,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn from_rewards(question_id: impl Into<String>, rewards: Vec<f64>) -> Self {
        let advantages = group_advantages(&rewards);
        Self {
            question_id: question_id.into(),
            rewards,
            advantages,
        }
    }

    pub fn size(&self) -> usize {
        self.rewards.len()
    }
}

fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Candidate `(surface, logprob)` pairs at one position: the sampled token
/// plus its alternatives.
fn candidates(token: &TokenLogprobs) -> impl Iterator<Item = (&str, f64)> {
    std::iter::once((token.token.as_str(), token.logprob)).chain(
        token
            .top_alternatives
            .iter()
            .map(|a| (a.token.as_str(), a.logprob)),
    )
}

/// Per-surface logprobs at a position, deduplicated (the sampled token is
/// usually also listed among the alternatives).
fn position_logprobs(token: &TokenLogprobs) -> Vec<(String, f64)> {
    let mut seen: HashMap<String, f64> = HashMap::new();
    for (surface, lp) in candidates(token) {
        seen.entry(surface.to_string())
            .and_modify(|v| *v = v.max(lp))
            .or_insert(lp);
    }
    let mut out: Vec<_> = seen.into_iter().collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

fn finish_logits(observed: [Vec<f64>; GRID_SIZE]) -> Option<ScoreDistribution> {
    let merged: Vec<Option<f64>> = observed
        .iter()
        .map(|v| (!v.is_empty()).then(|| logsumexp(v)))
        .collect();
    let min = merged
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    let floor = min - MISSING_LOGIT_OFFSET;
    let mut logits = [floor; GRID_SIZE];
    for (slot, value) in logits.iter_mut().zip(merged) {
        if let Some(v) = value {
            *slot = v;
        }
    }
    distribution_from_logits(&logits).ok()
}

fn single_position_distribution(token: &TokenLogprobs) -> Option<ScoreDistribution> {
    let mut observed: [Vec<f64>; GRID_SIZE] = Default::default();
    for (surface, lp) in position_logprobs(token) {
        if let Some(i) = canonical_grid_index(&surface) {
            observed[i].push(lp);
        }
    }
    finish_logits(observed)
}

/// Value split over several tokens, e.g. `0` `.` `7`. The leading position
/// decides between `0.x` and `1.0`; the fractional digit position decides x.
/// Logit of `0.d` is `lp(lead = 0) + lp(digit = d)`. When the sampled lead is
/// `1`, no digit information for `0.x` exists and the `0` mass goes to 0.0.
fn split_value_distribution(tokens: &[TokenLogprobs], lead: usize) -> Option<ScoreDistribution> {
    let lead_token = &tokens[lead];
    let lead_surface = lead_token.token.trim();
    let (digit_pos, sampled_zero) = match lead_surface {
        "0" | "1" => {
            let dot = tokens.get(lead + 1)?;
            let dot_text = dot.token.trim();
            if dot_text == "." {
                (lead + 2, lead_surface == "0")
            } else if dot_text.starts_with('.') {
                (lead + 1, lead_surface == "0")
            } else {
                return None;
            }
        }
        "0." | "1." => (lead + 1, lead_surface == "0."),
        _ => return None,
    };
    let digit_token = tokens.get(digit_pos)?;

    let mut lead_zero = Vec::new();
    let mut lead_one = Vec::new();
    for (surface, lp) in position_logprobs(lead_token) {
        match surface.trim() {
            "0" | "0." => lead_zero.push(lp),
            "1" | "1." => lead_one.push(lp),
            _ => {}
        }
    }
    let mut digits: [Vec<f64>; 10] = Default::default();
    for (surface, lp) in position_logprobs(digit_token) {
        let s = surface.trim();
        let s = s.strip_prefix('.').unwrap_or(s);
        if s.len() == 1 && s.as_bytes()[0].is_ascii_digit() {
            digits[(s.as_bytes()[0] - b'0') as usize].push(lp);
        }
    }

    let mut observed: [Vec<f64>; GRID_SIZE] = Default::default();
    if !lead_one.is_empty() {
        observed[10].push(logsumexp(&lead_one));
    }
    if !lead_zero.is_empty() {
        let zero = logsumexp(&lead_zero);
        if sampled_zero {
            for (d, lps) in digits.iter().enumerate() {
                if !lps.is_empty() {
                    observed[d].push(zero + logsumexp(lps));
                }
            }
        } else {
            observed[0].push(zero);
        }
    }
    finish_logits(observed)
}

/// Locate the score token following `anchor` and build its distribution.
fn distribution_from_tokens(tokens: &[TokenLogprobs], anchor: &str) -> Option<ScoreDistribution> {
    let mut starts = Vec::with_capacity(tokens.len());
    let mut text = String::new();
    for t in tokens {
        starts.push(text.len());
        text.push_str(&t.token);
    }
    let anchor_at = text.find(anchor)?;
    let after = anchor_at + anchor.len();
    let first = starts.iter().position(|&s| s >= after)?;
    for i in first..tokens.len() {
        let surface = tokens[i].token.trim();
        if surface.is_empty()
            || surface
                .chars()
                .all(|c| matches!(c, ':' | '"' | '\'' | '*' | '{' | '[' | '(') || c.is_whitespace())
        {
            continue;
        }
        if !begins_grid_value(surface) {
            return None;
        }
        if let Some(dist) = split_value_distribution(tokens, i) {
            return Some(dist);
        }
        return single_position_distribution(&tokens[i]);
    }
    None
}

/// Distribution for one dimension. Uses token logprobs when available, else
/// the literal sub-score as a delta on its nearest grid value.
pub fn extract_score_distribution(
    token_logprobs: Option<&[TokenLogprobs]>,
    text: &str,
    dimension: Dimension,
) -> Result<(ScoreDistribution, ExtractionMode), RewardError> {
    extract_with_anchor(token_logprobs, text, dimension.anchor())
        .ok_or(RewardError::NoScoreFound(dimension))
}

pub fn extract_with_anchor(
    token_logprobs: Option<&[TokenLogprobs]>,
    text: &str,
    anchor: &str,
) -> Option<(ScoreDistribution, ExtractionMode)> {
    if let Some(dist) = token_logprobs.and_then(|tokens| distribution_from_tokens(tokens, anchor)) {
        return Some((dist, ExtractionMode::LogprobWeighted));
    }
    let literal = textutil::number_after(text, anchor)?;
    if !(0.0..=1.0).contains(&literal) {
        return None;
    }
    Some((
        ScoreDistribution::delta(snap_to_grid(literal)),
        ExtractionMode::ArgmaxFallback,
    ))
}

/// Score a complete verifier response.
pub fn breakdown_from_verifier(
    token_logprobs: Option<&[TokenLogprobs]>,
    text: &str,
    weights: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    let mut dims = DimensionScores::new(0.0, 0.0, 0.0, 0.0);
    let mut mode = ExtractionMode::LogprobWeighted;
    for dimension in Dimension::ALL {
        let (dist, m) = extract_score_distribution(token_logprobs, text, dimension)?;
        if m == ExtractionMode::ArgmaxFallback {
            mode = m;
        }
        dims.set(dimension, expected_score(&dist));
    }
    let mut breakdown = weighted_total(dims, weights)?;
    breakdown.extraction_mode = mode;
    breakdown.verifier_literal_total =
        textutil::extract_block(text, "score").and_then(textutil::first_number);
    Ok(breakdown)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierConfig {
    pub model: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_logprobs: u8,
    pub weights: RewardWeights,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            model: "deepseek-r1".into(),
            max_tokens: 2048,
            temperature: 0.0,
            top_logprobs: SCORE_TOP_LOGPROBS,
            weights: RewardWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VerifierFailure {
    /// The provider could not be reached or kept failing.
    Unreachable { message: String },
    /// The provider answered but the call was rejected or malformed.
    Rejected { message: String },
    /// The verifier answered but a dimension score could not be found.
    Unscorable { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub index: usize,
    /// Raw weighted total, or 0 when the verifier failed.
    pub reward: f64,
    pub breakdown: Option<RewardBreakdown>,
    pub failure: Option<VerifierFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGroup {
    pub group: RolloutGroup,
    pub responses: Vec<ScoredResponse>,
}

impl ScoredGroup {
    pub fn all_unreachable(&self) -> bool {
        !self.responses.is_empty()
            && self
                .responses
                .iter()
                .all(|r| matches!(r.failure, Some(VerifierFailure::Unreachable { .. })))
    }
}

/// Verify every response of one question and compute group advantages over
/// the raw totals. Verifier failures score 0 and are flagged.
pub async fn score_rollout_group(
    question_id: &str,
    question: &str,
    responses: &[String],
    gateway: &Gateway,
    prompts: &PromptLibrary,
    config: &VerifierConfig,
) -> ScoredGroup {
    let template = prompts.get(TemplateId::InsightPoVerifier);
    let calls = responses
        .iter()
        .enumerate()
        .map(|(index, response)| async move {
            let prompt =
                match template.fill_pairs(&[("question", question), ("response", response)]) {
                    Ok(p) => p,
                    Err(e) => {
                        return failed(
                            index,
                            VerifierFailure::Rejected {
                                message: e.to_string(),
                            },
                        );
                    }
                };
            let req = CompletionRequest::single_user(&config.model, prompt)
                .with_max_tokens(config.max_tokens)
                .with_temperature(config.temperature)
                .with_top_logprobs(config.top_logprobs);
            match gateway.complete(&req).await {
                Ok(resp) => match breakdown_from_verifier(
                    resp.token_logprobs.as_deref(),
                    &resp.text,
                    &config.weights,
                ) {
                    Ok(breakdown) => ScoredResponse {
                        index,
                        reward: breakdown.raw_total,
                        breakdown: Some(breakdown),
                        failure: None,
                    },
                    Err(e) => failed(
                        index,
                        VerifierFailure::Unscorable {
                            message: e.to_string(),
                        },
                    ),
                },
                Err(e) => {
                    let message = e.to_string();
                    let failure = if e.is_unreachable() {
                        VerifierFailure::Unreachable { message }
                    } else {
                        VerifierFailure::Rejected { message }
                    };
                    failed(index, failure)
                }
            }
        });
    let scored = join_all(calls).await;
    let rewards = scored.iter().map(|s| s.reward).collect();
    ScoredGroup {
        group: RolloutGroup::from_rewards(question_id, rewards),
        responses: scored,
    }
}

fn failed(index: usize, failure: VerifierFailure) -> ScoredResponse {
    tracing::warn!(index, ?failure, "verifier failed; scoring response 0");
    ScoredResponse {
        index,
        reward: 0.0,
        breakdown: None,
        failure: Some(failure),
    }
}

/// Verifier output with the literal sub-scores, used by fixtures and the mock.
pub fn verifier_output(final_score: f64, dims: DimensionScores) -> String {
    format!(
        "<score>\n{final_score}\n</score>\n<exp>\n\"insight_quality\": {}\nexplanation: scripted\n\"logical_validity\": {}\nexplanation: scripted\n\"completeness\": {}\nexplanation: scripted\n\"clarity\": {}\nexplanation: scripted\n</exp>",
        dims.insight_quality, dims.logical_validity, dims.completeness, dims.clarity
    )
}
