//! Core library for hierarchical theorem-proving data and evaluation.
//!
//! - [`hierarchy`]: record types and the tagged `<tech>/<sketch>/<proof>` format
//! - [`prompts`]: prompt templates with slot filling and digests
//! - [`gateway`]: chat-completion client and scripted mock server
//! - [`corpus`]: annotation pipeline, dedup and statistics
//! - [`curriculum`]: stage-specific SFT views
//! - [`reward`]: verifier score extraction and group-relative advantages
//! - [`judge`]: LLM-as-judge scoring and benchmark runs
//! - [`entropy`]: token entropy traces, spikes and the δ^k bound oracle
//! - [`audit`]: human-audit sampling, storage and calibration

pub mod audit;
pub mod corpus;
pub mod curriculum;
pub mod entropy;
pub mod gateway;
pub mod hierarchy;
pub mod judge;
pub mod prompts;
pub mod reward;
mod textutil;

pub use gateway::{
    CompletionRequest, CompletionResponse, Gateway, GatewayConfig, GatewayError, TokenLogprobs,
};
pub use hierarchy::{
    parse_corpus_line, parse_hierarchical, render_corpus_line, render_hierarchical,
    HierarchicalRecord, Hierarchy, InsightBlock, StageView, TechniqueCategory,
    TechniqueDescription, TheoremRecord,
};
pub use prompts::{PromptLibrary, PromptTemplate, TemplateId};
pub use reward::{
    expected_score, group_advantages, weighted_total, DimensionScores, RewardBreakdown,
    RewardWeights, RolloutGroup, ScoreDistribution,
};
