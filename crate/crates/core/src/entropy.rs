//! Token-entropy traces, entropy spike detection, and an exhaustive check of
//! the probability bound π(p|q) ≤ δ^k on small autoregressive models.

use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Alternative, TokenLogprobs};
use crate::hierarchy::HierarchicalRecord;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EntropyError {
    #[error("distribution is empty or has no mass")]
    EmptyDistribution,
    #[error("token concatenation does not match the text (first difference at byte {0})")]
    OffsetMismatch(usize),
    #[error("invalid logprob dump line {line}: {message}")]
    DumpLine { line: usize, message: String },
}

/// Shannon entropy in nats of `weights` after renormalization. Zero weights
/// contribute nothing.
pub fn token_entropy(weights: &[f64]) -> Result<f64, EntropyError> {
    let total: f64 = weights.iter().filter(|w| w.is_finite() && **w > 0.0).sum();
    if weights.is_empty() || total <= 0.0 {
        return Err(EntropyError::EmptyDistribution);
    }
    let h = weights
        .iter()
        .filter(|w| w.is_finite() && **w > 0.0)
        .map(|w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEntropy {
    pub token: String,
    pub entropy: f64,
    /// Raw probability mass of the observed alternatives; `None` when the
    /// position had no alternatives (entropy reported as 0).
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrace {
    pub tokens: Vec<TokenEntropy>,
    pub spike_indices: Vec<usize>,
}

impl EntropyTrace {
    pub fn from_entropies(values: &[f64]) -> Self {
        Self {
            tokens: values
                .iter()
                .map(|&entropy| TokenEntropy {
                    token: String::new(),
                    entropy,
                    coverage: Some(1.0),
                })
                .collect(),
            spike_indices: Vec::new(),
        }
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.tokens.iter().map(|t| t.entropy).collect()
    }

    pub fn text(&self) -> String {
        self.tokens.iter().map(|t| t.token.as_str()).collect()
    }

    pub fn with_spikes(mut self, policy: &SpikePolicy) -> Self {
        self.spike_indices = detect_spikes(&self, policy);
        self
    }

    /// CSV with columns position, token, entropy, is_spike.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["position", "token", "entropy", "is_spike"])?;
        let mut spikes = self.spike_indices.iter().peekable();
        for (i, t) in self.tokens.iter().enumerate() {
            let is_spike = spikes.next_if(|&&s| s == i).is_some();
            w.write_record([
                i.to_string(),
                t.token.clone(),
                t.entropy.to_string(),
                is_spike.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Distinct alternatives in listed order, then the sampled token if it was
/// not among them. Order is fixed so the float sums are reproducible.
fn position_weights(token: &TokenLogprobs) -> Vec<f64> {
    let mut seen: Vec<(&str, f64)> = Vec::with_capacity(token.top_alternatives.len() + 1);
    let candidates = token
        .top_alternatives
        .iter()
        .map(|a| (a.token.as_str(), a.logprob))
        .chain(std::iter::once((token.token.as_str(), token.logprob)));
    for (tok, lp) in candidates {
        if !seen.iter().any(|(t, _)| *t == tok) {
            seen.push((tok, lp));
        }
    }
    seen.into_iter().map(|(_, lp)| lp.exp()).collect()
}

/// Per-position entropy of the renormalized top-k alternatives.
pub fn trace_from_logprobs(tokens: &[TokenLogprobs]) -> EntropyTrace {
    let tokens = tokens
        .iter()
        .map(|t| {
            if t.top_alternatives.is_empty() {
                return TokenEntropy {
                    token: t.token.clone(),
                    entropy: 0.0,
                    coverage: None,
                };
            }
            let weights = position_weights(t);
            TokenEntropy {
                token: t.token.clone(),
                entropy: token_entropy(&weights).unwrap_or(0.0),
                coverage: Some(weights.iter().sum::<f64>().min(1.0)),
            }
        })
        .collect();
    EntropyTrace {
        tokens,
        spike_indices: Vec::new(),
    }
}

#[derive(Debug, Deserialize)]
struct DumpLine {
    token: String,
    logprob: f64,
    #[serde(default)]
    top: Vec<Alternative>,
}

/// Parse a logprob dump: JSONL, one `{"token","logprob","top":[…]}` per line.
pub fn parse_logprob_dump(text: &str) -> Result<Vec<TokenLogprobs>, EntropyError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: DumpLine = serde_json::from_str(line).map_err(|e| EntropyError::DumpLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        if d.logprob > 1e-9 || d.top.iter().any(|a| a.logprob > 1e-9) {
            return Err(EntropyError::DumpLine {
                line: i + 1,
                message: "logprob must be ≤ 0".into(),
            });
        }
        out.push(TokenLogprobs::new(d.token, d.logprob, d.top));
    }
    Ok(out)
}

/// Inverse of [`parse_logprob_dump`].
pub fn render_logprob_dump(tokens: &[TokenLogprobs]) -> String {
    let mut out = String::new();
    for t in tokens {
        let line =
            serde_json::json!({"token": t.token, "logprob": t.logprob, "top": t.top_alternatives});
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikePolicy {
    pub window: usize,
    pub threshold: f64,
}

impl Default for SpikePolicy {
    fn default() -> Self {
        Self {
            window: 32,
            threshold: 2.0,
        }
    }
}

const FLAT: f64 = 1e-12;

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Position i is a spike when its z-score against the previous min(i, W)
/// entropies exceeds τ and its entropy exceeds the median of the trace.
/// A flat history makes any strictly larger value an infinite z-score.
pub fn detect_spikes(trace: &EntropyTrace, policy: &SpikePolicy) -> Vec<usize> {
    let h = trace.entropies();
    if h.len() < 2 {
        return Vec::new();
    }
    let window = policy.window.max(2);
    let med = median(&h);
    let mut spikes = Vec::new();
    for i in 1..h.len() {
        if h[i] <= med {
            continue;
        }
        let prev = &h[i.saturating_sub(window)..i];
        let n = prev.len() as f64;
        let mean = prev.iter().sum::<f64>() / n;
        let std = (prev.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let diff = h[i] - mean;
        let z = if std < FLAT {
            if diff > FLAT {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            diff / std
        };
        if z > policy.threshold {
            spikes.push(i);
        }
    }
    spikes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeAlignment {
    pub index: usize,
    /// Byte offset of the spike token in the text.
    pub offset: usize,
    pub nearest_phrase: Option<String>,
    pub distance: Option<usize>,
    pub hit: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub window: usize,
    pub spikes: Vec<SpikeAlignment>,
    pub hits: usize,
    pub misses: usize,
}

/// Map each spike to the nearest occurrence of any phrase. A spike inside a
/// phrase has distance 0; it is a hit when the distance is within `window`
/// bytes.
pub fn align_spikes(
    trace: &EntropyTrace,
    text: &str,
    phrases: &[String],
    window: usize,
) -> Result<AlignmentReport, EntropyError> {
    let joined = trace.text();
    if joined != text {
        let at = joined
            .bytes()
            .zip(text.bytes())
            .position(|(a, b)| a != b)
            .unwrap_or(joined.len().min(text.len()));
        return Err(EntropyError::OffsetMismatch(at));
    }
    let mut offsets = Vec::with_capacity(trace.tokens.len());
    let mut pos = 0;
    for t in &trace.tokens {
        offsets.push(pos);
        pos += t.token.len();
    }
    let lower = text.to_lowercase();
    let mut spans = Vec::new();
    for phrase in phrases {
        let needle = phrase.trim().to_lowercase();
        if needle.is_empty() || lower.len() != text.len() {
            continue;
        }
        let mut from = 0;
        while let Some(at) = lower[from..].find(&needle) {
            spans.push((
                from + at,
                from + at + needle.len(),
                phrase.trim().to_string(),
            ));
            from += at + needle.len().max(1);
        }
    }
    let mut report = AlignmentReport {
        window,
        ..Default::default()
    };
    for &index in &trace.spike_indices {
        let offset = offsets[index];
        let nearest = spans
            .iter()
            .map(|(s, e, p)| {
                let d = if offset < *s {
                    s - offset
                } else if offset >= *e {
                    offset - e + 1
                } else {
                    0
                };
                (d, p)
            })
            .min_by_key(|(d, _)| *d);
        let hit = nearest.is_some_and(|(d, _)| d <= window);
        if hit {
            report.hits += 1;
        } else {
            report.misses += 1;
        }
        report.spikes.push(SpikeAlignment {
            index,
            offset,
            nearest_phrase: nearest.map(|(_, p)| p.clone()),
            distance: nearest.map(|(d, _)| d),
            hit,
        });
    }
    Ok(report)
}

/// [`align_spikes`] against the present technique descriptions of a record,
/// with the trace generated from the record's proof.
pub fn align_spikes_to_techniques(
    trace: &EntropyTrace,
    record: &HierarchicalRecord,
    window: usize,
) -> Result<AlignmentReport, EntropyError> {
    let phrases: Vec<String> = record
        .sections
        .insight()
        .map(|b| {
            b.techniques()
                .iter()
                .filter_map(|t| t.description.as_text().map(str::to_string))
                .collect()
        })
        .unwrap_or_default();
    align_spikes(trace, record.proof(), &phrases, window)
}

/// Exhaustive enumeration refuses models with more sequences than this.
pub const MAX_ENUMERATION: u64 = 10_000_000;

/// Per-sequence rows are kept only for enumerations up to this size.
pub const DEFAULT_TABLE_LIMIT: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("{sequences} sequences exceed the enumeration limit of {limit}")]
    EnumerationTooLarge { sequences: u128, limit: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Symbol {
    pub name: String,
    pub technique: bool,
}

/// A fixed-order autoregressive model over a small alphabet. The question q is
/// implicit (every sequence is conditioned on it). Contexts are the previous
/// `order` symbols, padded with a start marker at the beginning. Every
/// technique symbol has conditional probability strictly below δ in every
/// context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyAutoregressiveModel {
    alphabet: Vec<Symbol>,
    order: usize,
    max_length: usize,
    delta: f64,
    /// Row per context index, each of length |alphabet|.
    table: Vec<Vec<f64>>,
}

impl ToyAutoregressiveModel {
    /// Number of context rows for an alphabet size and order.
    pub fn context_count(alphabet_len: usize, order: usize) -> usize {
        (alphabet_len + 1).pow(order as u32)
    }

    pub fn new(
        alphabet: Vec<Symbol>,
        order: usize,
        max_length: usize,
        delta: f64,
        table: Vec<Vec<f64>>,
    ) -> Result<Self, ModelError> {
        let bad = |m: String| Err(ModelError::InvalidModel(m));
        if alphabet.is_empty() {
            return bad("alphabet is empty".into());
        }
        if !(delta > 0.0 && delta < 1.0) {
            return bad(format!("δ = {delta} is not in (0, 1)"));
        }
        if max_length == 0 {
            return bad("max_length must be at least 1".into());
        }
        if order > 6 {
            return bad("order above 6 is not supported".into());
        }
        let rows = Self::context_count(alphabet.len(), order);
        if table.len() != rows {
            return bad(format!("expected {rows} rows, got {}", table.len()));
        }
        for (r, row) in table.iter().enumerate() {
            if row.len() != alphabet.len() {
                return bad(format!(
                    "row {r} has {} entries, expected {}",
                    row.len(),
                    alphabet.len()
                ));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return bad(format!("row {r} has a negative or non-finite entry"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return bad(format!("row {r} sums to {sum}"));
            }
            for (s, p) in row.iter().enumerate() {
                if alphabet[s].technique && *p >= delta {
                    return bad(format!(
                        "P({} | context {r}) = {p} is not below δ = {delta}",
                        alphabet[s].name
                    ));
                }
            }
        }
        Ok(Self {
            alphabet,
            order,
            max_length,
            delta,
            table,
        })
    }

    /// Random valid model: technique entries uniform in [0, cap) with
    /// cap < δ and total technique mass below 1, the rest spread over the
    /// reasoning symbols with random weights.
    pub fn random(
        techniques: usize,
        reasoning: usize,
        order: usize,
        max_length: usize,
        delta: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if reasoning == 0 {
            return Err(ModelError::InvalidModel(
                "at least one reasoning symbol is needed".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alphabet: Vec<Symbol> = (0..techniques)
            .map(|i| Symbol {
                name: format!("t{i}"),
                technique: true,
            })
            .chain((0..reasoning).map(|i| Symbol {
                name: format!("r{i}"),
                technique: false,
            }))
            .collect();
        let cap = delta.min(0.9 / techniques.max(1) as f64);
        let rows = Self::context_count(alphabet.len(), order);
        let mut table = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut row = vec![0.0; alphabet.len()];
            let mut tech_mass = 0.0;
            for p in row.iter_mut().take(techniques) {
                *p = rng.random_range(0.0..cap) * (1.0 - 1e-9);
                tech_mass += *p;
            }
            let weights: Vec<f64> = (0..reasoning)
                .map(|_| rng.random_range(0.05..1.0))
                .collect();
            let wsum: f64 = weights.iter().sum();
            for (p, w) in row[techniques..].iter_mut().zip(&weights) {
                *p = (1.0 - tech_mass) * w / wsum;
            }
            table.push(row);
        }
        Self::new(alphabet, order, max_length, delta, table)
    }

    pub fn alphabet(&self) -> &[Symbol] {
        &self.alphabet
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn table(&self) -> &[Vec<f64>] {
        &self.table
    }

    pub fn is_technique(&self, symbol: usize) -> bool {
        self.alphabet[symbol].technique
    }

    /// Context row index for the symbols preceding position `pos` of `seq`.
    pub fn context_index(&self, seq: &[usize], pos: usize) -> usize {
        let start_marker = self.alphabet.len();
        let base = self.alphabet.len() + 1;
        let mut idx = 0;
        for back in (1..=self.order).rev() {
            let s = if pos >= back {
                seq[pos - back]
            } else {
                start_marker
            };
            idx = idx * base + s;
        }
        idx
    }

    pub fn conditional(&self, seq: &[usize], pos: usize) -> f64 {
        self.table[self.context_index(seq, pos)][seq[pos]]
    }

    /// Probability of a sequence as the product of its conditionals.
    pub fn sequence_probability(&self, seq: &[usize]) -> f64 {
        (0..seq.len()).map(|i| self.conditional(seq, i)).product()
    }

    pub fn technique_count(&self, seq: &[usize]) -> usize {
        seq.iter().filter(|&&s| self.is_technique(s)).count()
    }

    /// Same model with technique entries scaled by `new_delta / δ` and the
    /// freed mass moved onto reasoning symbols in proportion to their
    /// current probabilities.
    pub fn rescale_delta(&self, new_delta: f64) -> Result<Self, ModelError> {
        if !(new_delta > 0.0 && new_delta <= self.delta) {
            return Err(ModelError::InvalidModel(format!(
                "new δ {new_delta} must be in (0, {}]",
                self.delta
            )));
        }
        let factor = new_delta / self.delta;
        let table = self
            .table
            .iter()
            .map(|row| {
                let tech: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(s, _)| self.is_technique(*s))
                    .map(|(_, p)| p)
                    .sum();
                let reasoning = 1.0 - tech;
                let freed = tech * (1.0 - factor);
                row.iter()
                    .enumerate()
                    .map(|(s, p)| {
                        if self.is_technique(s) {
                            p * factor
                        } else if reasoning > 0.0 {
                            p + freed * p / reasoning
                        } else {
                            *p
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(
            self.alphabet.clone(),
            self.order,
            self.max_length,
            new_delta,
            table,
        )
    }

    /// Probability that position `pos` holds each symbol, marginalizing over
    /// all prefixes (forward pass over context states).
    pub fn position_marginals(&self) -> Vec<Vec<f64>> {
        let a = self.alphabet.len();
        let base = a + 1;
        let contexts = self.table.len();
        let mut state = vec![0.0; contexts];
        state[self.context_index(&[], 0)] = 1.0;
        let mut out = Vec::with_capacity(self.max_length);
        for _ in 0..self.max_length {
            let mut marginal = vec![0.0; a];
            let mut next = vec![0.0; contexts];
            for (ctx, &mass) in state.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                for (s, &p) in self.table[ctx].iter().enumerate() {
                    marginal[s] += mass * p;
                    if self.order > 0 {
                        let shifted = (ctx * base + s) % contexts;
                        next[shifted] += mass * p;
                    }
                }
            }
            if self.order == 0 {
                next = state.clone();
            }
            state = next;
            out.push(marginal);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceBound {
    pub sequence: Vec<usize>,
    pub k: usize,
    pub probability: f64,
    pub bound: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalCheck {
    pub symbol: String,
    /// Largest marginal probability over positions.
    pub max_marginal: f64,
    pub position: usize,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckResult {
    pub delta: f64,
    pub max_length: usize,
    pub sequences: u64,
    /// Per-sequence rows, present when the enumeration is small enough.
    pub table: Option<Vec<SequenceBound>>,
    pub violations: Vec<SequenceBound>,
    pub all_satisfied: bool,
    /// Largest probability / δ^k over all sequences.
    pub tightest_ratio: f64,
    pub tightest_sequence: Vec<usize>,
    pub total_probability: f64,
    pub marginals: Vec<MarginalCheck>,
    pub marginals_satisfied: bool,
}

/// Slack allowed on the per-sequence bound comparison.
pub const BOUND_SLACK: f64 = 1e-12;

struct Enumeration<'a> {
    model: &'a ToyAutoregressiveModel,
    keep_table: bool,
    seq: Vec<usize>,
    result: BoundCheckResult,
}

impl Enumeration<'_> {
    fn visit(&mut self, pos: usize, prob: f64, k: usize) {
        let m = self.model;
        if pos == m.max_length {
            let bound = m.delta.powi(k as i32);
            let satisfied = prob <= bound + BOUND_SLACK;
            let ratio = prob / bound;
            let r = &mut self.result;
            r.sequences += 1;
            r.total_probability += prob;
            if ratio > r.tightest_ratio {
                r.tightest_ratio = ratio;
                r.tightest_sequence.clone_from(&self.seq);
            }
            let row = || SequenceBound {
                sequence: self.seq.clone(),
                k,
                probability: prob,
                bound,
                satisfied,
            };
            if !satisfied {
                r.all_satisfied = false;
                if r.violations.len() < 100 {
                    r.violations.push(row());
                }
            }
            if self.keep_table {
                let entry = row();
                self.result.table.get_or_insert_with(Vec::new).push(entry);
            }
            return;
        }
        let ctx = m.context_index(&self.seq, pos);
        for s in 0..m.alphabet.len() {
            let p = m.table[ctx][s];
            self.seq.push(s);
            self.visit(pos + 1, prob * p, k + usize::from(m.is_technique(s)));
            self.seq.pop();
        }
    }
}

/// Enumerate every sequence of length L and check π(p|q) ≤ δ^k for each,
/// plus the marginal condition π(t at position i | q) < δ for every
/// technique symbol and position.
pub fn check_bound(
    model: &ToyAutoregressiveModel,
    table_limit: u64,
) -> Result<BoundCheckResult, ModelError> {
    let count = (model.alphabet.len() as u128)
        .checked_pow(model.max_length as u32)
        .unwrap_or(u128::MAX);
    if count > MAX_ENUMERATION as u128 {
        return Err(ModelError::EnumerationTooLarge {
            sequences: count,
            limit: MAX_ENUMERATION,
        });
    }
    let mut e = Enumeration {
        model,
        keep_table: count <= table_limit as u128,
        seq: Vec::with_capacity(model.max_length),
        result: BoundCheckResult {
            delta: model.delta,
            max_length: model.max_length,
            sequences: 0,
            table: None,
            violations: Vec::new(),
            all_satisfied: true,
            tightest_ratio: 0.0,
            tightest_sequence: Vec::new(),
            total_probability: 0.0,
            marginals: Vec::new(),
            marginals_satisfied: true,
        },
    };
    e.visit(0, 1.0, 0);
    let mut result = e.result;

    let marginals = model.position_marginals();
    for (s, sym) in model.alphabet.iter().enumerate() {
        if !sym.technique {
            continue;
        }
        let (position, max_marginal) = marginals.iter().enumerate().map(|(i, m)| (i, m[s])).fold(
            (0, f64::MIN),
            |best, cur| if cur.1 > best.1 { cur } else { best },
        );
        let satisfied = max_marginal < model.delta;
        result.marginals_satisfied &= satisfied;
        result.marginals.push(MarginalCheck {
            symbol: sym.name.clone(),
            max_marginal,
            position,
            satisfied,
        });
    }
    Ok(result)
}
