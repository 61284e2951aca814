//! Stage-specific SFT views of a hierarchical corpus.
//!
//! Stage 1 targets are the bare proof, stage 2 adds the sketch and stage 3
//! the technique block, all in canonical tagged form with `<proof>` last.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::hierarchy::{render_hierarchical, HierarchicalRecord, StageView};
use crate::textutil;

pub const DEFAULT_EPOCHS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSelection {
    /// The base proof as it appeared before annotation.
    Original,
    /// The proof returned by the annotator (may be revised).
    #[default]
    Annotated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    ThreeStage,
    TwoStage,
}

impl Schedule {
    pub fn stages(self) -> &'static [StageView] {
        match self {
            Schedule::ThreeStage => &[
                StageView::ProofOnly,
                StageView::SketchProof,
                StageView::Full,
            ],
            Schedule::TwoStage => &[StageView::ProofOnly, StageView::Full],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageExample {
    pub question: String,
    pub target: String,
    pub stage: StageView,
    pub source_id: String,
}

impl StageExample {
    /// Chat-format JSONL line, with an optional system turn first.
    pub fn to_chat_line(&self, system_prompt: Option<&str>) -> String {
        let mut messages = Vec::with_capacity(3);
        if let Some(system) = system_prompt {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": self.question}));
        messages.push(json!({"role": "assistant", "content": self.target}));
        json!({"messages": messages, "source_id": self.source_id}).to_string()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageOutput {
    pub examples: Vec<StageExample>,
    /// Ids of records lacking a component the stage needs.
    pub skipped: Vec<String>,
}

/// Target text for one record under one stage, or `None` if the record lacks
/// a component the stage needs.
pub fn stage_target(
    record: &HierarchicalRecord,
    stage: StageView,
    selection: TargetSelection,
) -> Option<String> {
    let proof = match selection {
        TargetSelection::Original => record.original_proof(),
        TargetSelection::Annotated => record.proof(),
    };
    match stage {
        StageView::ProofOnly => Some(proof.trim().to_string()),
        _ => {
            let sections = record.sections.with_proof(proof).ok()?;
            render_hierarchical(&sections, stage).ok()
        }
    }
}

pub fn emit_stage<'a>(
    corpus: impl IntoIterator<Item = &'a HierarchicalRecord>,
    stage: StageView,
    selection: TargetSelection,
) -> StageOutput {
    let mut out = StageOutput::default();
    for record in corpus {
        match stage_target(record, stage, selection) {
            Some(target) => out.examples.push(StageExample {
                question: record.question().to_string(),
                target,
                stage,
                source_id: record.id().to_string(),
            }),
            None => out.skipped.push(record.id().to_string()),
        }
    }
    out
}

/// The final proof component of a model output: the body of the last
/// `<proof>` block, or the whole text when it carries no proof tags.
pub fn proof_component(text: &str) -> &str {
    let lower = text.to_ascii_lowercase();
    match lower.rfind("<proof>") {
        Some(open) => {
            let rest = &text[open..];
            textutil::extract_block(rest, "proof").unwrap_or_else(|| rest["<proof>".len()..].trim())
        }
        None => text.trim(),
    }
}

pub fn stage_file_name(stage: StageView) -> &'static str {
    match stage {
        StageView::ProofOnly => "stage1_proof_only.jsonl",
        StageView::SketchProof => "stage2_sketch_proof.jsonl",
        StageView::Full => "stage3_full.jsonl",
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifestEntry {
    pub stage: u8,
    pub view: StageView,
    pub file: String,
    pub examples: usize,
    pub skipped: usize,
    pub epochs: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumManifest {
    pub schedule: Schedule,
    pub target_selection: TargetSelection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    pub source_records: usize,
    pub stages: Vec<StageManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct ScheduleOptions {
    pub schedule: Schedule,
    pub target_selection: TargetSelection,
    pub system_prompt: Option<String>,
    pub epochs: u32,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            schedule: Schedule::ThreeStage,
            target_selection: TargetSelection::Annotated,
            system_prompt: None,
            epochs: DEFAULT_EPOCHS,
        }
    }
}

/// Write one JSONL file per stage of the schedule plus `manifest.json` into
/// `out_dir`.
pub fn emit_schedule(
    corpus: &[HierarchicalRecord],
    options: &ScheduleOptions,
    out_dir: &Path,
) -> io::Result<CurriculumManifest> {
    fs::create_dir_all(out_dir)?;
    let mut stages = Vec::new();
    for &stage in options.schedule.stages() {
        let output = emit_stage(corpus, stage, options.target_selection);
        let file = stage_file_name(stage);
        let mut buf = Vec::new();
        for example in &output.examples {
            buf.extend_from_slice(
                example
                    .to_chat_line(options.system_prompt.as_deref())
                    .as_bytes(),
            );
            buf.push(b'\n');
        }
        write_file(&out_dir.join(file), &buf)?;
        stages.push(StageManifestEntry {
            stage: stage.stage_number(),
            view: stage,
            file: file.to_string(),
            examples: output.examples.len(),
            skipped: output.skipped.len(),
            epochs: options.epochs,
        });
    }
    let manifest = CurriculumManifest {
        schedule: options.schedule,
        target_selection: options.target_selection,
        system_prompt: options.system_prompt.clone(),
        source_records: corpus.len(),
        stages,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out_dir.join(MANIFEST_FILE), format!("{json}\n").as_bytes())?;
    Ok(manifest)
}

fn write_file(path: &PathBuf, bytes: &[u8]) -> io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()
}
