//! Prompt templates with named slots.
//!
//! Templates live as plain text files next to a `manifest.json` sidecar
//! (id, file, slots, digest). The shipped set is compiled in; an operator can
//! point [`PromptLibrary::load_dir`] at a directory with the same layout to
//! override them.
//!
//! Slot syntax: `{name}` where `name` is `[A-Za-z_][A-Za-z0-9_]*` and the
//! opening brace is not preceded by an ASCII letter, digit or backslash. This
//! leaves LaTeX such as `\begin{enumerate}` and `\{x_1\}` untouched. Braces
//! that do not form a slot are literal text.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    DataConstruction,
    ProofEvaluation,
    #[serde(rename = "insightpo_verifier")]
    InsightPoVerifier,
    InsightGeneration,
    /// Bare `{}` placeholders of the original are named `question`, `insight`.
    InsightEvaluation,
    PlanAndSolve,
    LeastToMost,
    SelfDiscover,
}

impl TemplateId {
    pub const ALL: [TemplateId; 8] = [
        TemplateId::DataConstruction,
        TemplateId::ProofEvaluation,
        TemplateId::InsightPoVerifier,
        TemplateId::InsightGeneration,
        TemplateId::InsightEvaluation,
        TemplateId::PlanAndSolve,
        TemplateId::LeastToMost,
        TemplateId::SelfDiscover,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::DataConstruction => "data_construction",
            TemplateId::ProofEvaluation => "proof_evaluation",
            TemplateId::InsightPoVerifier => "insightpo_verifier",
            TemplateId::InsightGeneration => "insight_generation",
            TemplateId::InsightEvaluation => "insight_evaluation",
            TemplateId::PlanAndSolve => "plan_and_solve",
            TemplateId::LeastToMost => "least_to_most",
            TemplateId::SelfDiscover => "self_discover",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("missing binding for slot `{0}`")]
    MissingSlot(String),
    #[error("binding `{0}` does not name a slot of this template")]
    UnknownSlot(String),
    #[error("template {id}: declared slots {declared:?} do not match body slots {found:?}")]
    SlotMismatch {
        id: TemplateId,
        declared: Vec<String>,
        found: Vec<String>,
    },
    #[error("template {id}: manifest digest {expected} does not match content digest {actual}")]
    DigestMismatch {
        id: TemplateId,
        expected: String,
        actual: String,
    },
    #[error("template {0} is not present in the manifest")]
    MissingTemplate(TemplateId),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    id: TemplateId,
    body: String,
    slots: Vec<String>,
    digest: String,
}

impl PromptTemplate {
    /// Build a template, checking that `slots` and the body agree.
    pub fn new(
        id: TemplateId,
        body: impl Into<String>,
        slots: Vec<String>,
    ) -> Result<Self, PromptError> {
        let body = body.into();
        let found: BTreeSet<String> = scan_slots(&body)
            .into_iter()
            .map(|(_, _, n)| n.to_string())
            .collect();
        let declared: BTreeSet<String> = slots.iter().cloned().collect();
        if found != declared || declared.len() != slots.len() {
            return Err(PromptError::SlotMismatch {
                id,
                declared: slots,
                found: found.into_iter().collect(),
            });
        }
        let digest = content_digest(&body);
        Ok(Self {
            id,
            body,
            slots,
            digest,
        })
    }

    pub fn id(&self) -> TemplateId {
        self.id
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn slots(&self) -> &[String] {
        &self.slots
    }

    /// Hex SHA-256 of the body bytes.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Replace every slot with its binding. Bindings are inserted verbatim;
    /// slot-like text inside a binding is never expanded.
    pub fn fill<K, V>(&self, bindings: &HashMap<K, V>) -> Result<String, PromptError>
    where
        K: AsRef<str> + std::hash::Hash + Eq,
        V: AsRef<str>,
    {
        let lookup: HashMap<&str, &str> = bindings
            .iter()
            .map(|(k, v)| (k.as_ref(), v.as_ref()))
            .collect();
        for key in lookup.keys() {
            if !self.slots.iter().any(|s| s == key) {
                return Err(PromptError::UnknownSlot((*key).to_string()));
            }
        }
        for slot in &self.slots {
            if !lookup.contains_key(slot.as_str()) {
                return Err(PromptError::MissingSlot(slot.clone()));
            }
        }
        let mut out = String::with_capacity(
            self.body.len() + lookup.values().map(|v| v.len()).sum::<usize>(),
        );
        let mut cursor = 0;
        for (start, end, name) in scan_slots(&self.body) {
            out.push_str(&self.body[cursor..start]);
            out.push_str(lookup[name]);
            cursor = end;
        }
        out.push_str(&self.body[cursor..]);
        Ok(out)
    }

    /// Convenience for the common two-slot case.
    pub fn fill_pairs(&self, pairs: &[(&str, &str)]) -> Result<String, PromptError> {
        let bindings: HashMap<&str, &str> = pairs.iter().copied().collect();
        self.fill(&bindings)
    }
}

/// Hex SHA-256 digest of template text.
pub fn content_digest(body: &str) -> String {
    hex::encode(Sha256::digest(body.as_bytes()))
}

/// Digest of a template, recorded alongside pipeline artifacts.
pub fn template_digest(template: &PromptTemplate) -> String {
    template.digest.clone()
}

/// Slot occurrences as `(start, end, name)` byte ranges, in body order.
fn scan_slots(body: &str) -> Vec<(usize, usize, &str)> {
    let bytes = body.as_bytes();
    let mut slots = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let preceded_by_word = i > 0 && {
                let p = bytes[i - 1];
                p.is_ascii_alphanumeric() || p == b'\\'
            };
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                j += 1;
            }
            let name = &body[i + 1..j];
            let valid_name = !name.is_empty() && !name.as_bytes()[0].is_ascii_digit();
            if !preceded_by_word && valid_name && j < bytes.len() && bytes[j] == b'}' {
                slots.push((i, j + 1, name));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    slots
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: TemplateId,
    pub file: String,
    pub slots: Vec<String>,
    pub digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub templates: Vec<ManifestEntry>,
}

const SHIPPED_MANIFEST: &str = include_str!("../templates/manifest.json");

fn shipped_body(file: &str) -> Option<&'static str> {
    Some(match file {
        "data_construction.txt" => include_str!("../templates/data_construction.txt"),
        "proof_evaluation.txt" => include_str!("../templates/proof_evaluation.txt"),
        "insightpo_verifier.txt" => include_str!("../templates/insightpo_verifier.txt"),
        "insight_generation.txt" => include_str!("../templates/insight_generation.txt"),
        "insight_evaluation.txt" => include_str!("../templates/insight_evaluation.txt"),
        "plan_and_solve.txt" => include_str!("../templates/plan_and_solve.txt"),
        "least_to_most.txt" => include_str!("../templates/least_to_most.txt"),
        "self_discover.txt" => include_str!("../templates/self_discover.txt"),
        _ => return None,
    })
}

/// The full set of templates, keyed by id.
#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl PromptLibrary {
    /// The templates compiled into this crate.
    pub fn shipped() -> Self {
        Self::from_manifest(SHIPPED_MANIFEST, |file| {
            shipped_body(file)
                .map(str::to_string)
                .ok_or_else(|| PromptError::Manifest(format!("unknown shipped file {file}")))
        })
        .expect("shipped templates are consistent")
    }

    /// Load a template directory (`manifest.json` plus the listed files).
    /// Digests are verified so that edited files are detected.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let read = |path: &Path| {
            std::fs::read_to_string(path).map_err(|e| PromptError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        };
        let manifest = read(&dir.join("manifest.json"))?;
        Self::from_manifest(&manifest, |file| read(&dir.join(file)))
    }

    fn from_manifest(
        manifest: &str,
        mut load: impl FnMut(&str) -> Result<String, PromptError>,
    ) -> Result<Self, PromptError> {
        let manifest: Manifest =
            serde_json::from_str(manifest).map_err(|e| PromptError::Manifest(e.to_string()))?;
        let mut templates = BTreeMap::new();
        for entry in manifest.templates {
            let body = load(&entry.file)?;
            let template = PromptTemplate::new(entry.id, body, entry.slots)?;
            if template.digest != entry.digest {
                return Err(PromptError::DigestMismatch {
                    id: entry.id,
                    expected: entry.digest,
                    actual: template.digest,
                });
            }
            templates.insert(entry.id, template);
        }
        for id in TemplateId::ALL {
            if !templates.contains_key(&id) {
                return Err(PromptError::MissingTemplate(id));
            }
        }
        Ok(Self { templates })
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }

    /// Rebuild a manifest describing the current templates.
    pub fn manifest(&self) -> Manifest {
        Manifest {
            version: 1,
            templates: self
                .templates
                .values()
                .map(|t| ManifestEntry {
                    id: t.id,
                    file: format!("{}.txt", t.id.as_str()),
                    slots: t.slots.clone(),
                    digest: t.digest.clone(),
                })
                .collect(),
        }
    }
}

impl Default for PromptLibrary {
    fn default() -> Self {
        Self::shipped()
    }
}
