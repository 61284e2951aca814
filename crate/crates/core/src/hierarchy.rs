//! Hierarchical theorem-proof records and their tagged text form.
//!
//! A response in the hierarchical format looks like
//!
//! ```text
//! <tech>
//! Let's analyze the conditions in this question. ...
//! <construction>: ...
//! <theorem call>: ...
//! <transformation>: no
//! </tech>
//! <sketch>
//! ...
//! </sketch>
//! <proof>
//! ...
//! </proof>
//! ```
//!
//! Parsing is strict about section order and tag multiplicity, lenient about
//! whitespace and about text outside the sections (reported as warnings).
//! Tag matching is ASCII case-insensitive. Section bodies are opaque UTF-8;
//! LaTeX is never interpreted.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Prefix the annotation prompt asks every technique analysis to start with.
pub const GUIDING_PREFIX: &str = "Let's analyze the conditions in this question.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TheoremRecord {
    pub id: String,
    pub question: String,
    pub proof: String,
}

impl TheoremRecord {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        proof: impl Into<String>,
    ) -> Result<Self, RecordError> {
        let record = Self {
            id: id.into(),
            question: question.into(),
            proof: proof.into(),
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        if self.question.trim().is_empty() {
            return Err(RecordError::EmptyField("question"));
        }
        if self.proof.trim().is_empty() {
            return Err(RecordError::EmptyField("proof"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TechniqueCategory {
    Construction,
    TheoremCall,
    Transformation,
}

impl TechniqueCategory {
    pub const ALL: [TechniqueCategory; 3] = [
        TechniqueCategory::Construction,
        TechniqueCategory::TheoremCall,
        TechniqueCategory::Transformation,
    ];

    /// Name used inside the tag, e.g. `theorem call` for `<theorem call>`.
    pub fn tag_name(self) -> &'static str {
        match self {
            TechniqueCategory::Construction => "construction",
            TechniqueCategory::TheoremCall => "theorem call",
            TechniqueCategory::Transformation => "transformation",
        }
    }

    /// Key used in the JSONL corpus schema.
    pub fn json_key(self) -> &'static str {
        match self {
            TechniqueCategory::Construction => "construction",
            TechniqueCategory::TheoremCall => "theorem_call",
            TechniqueCategory::Transformation => "transformation",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TechniqueCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag_name())
    }
}

/// Technique text for one category. `Absent` is written as the literal `no`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TechniqueDescription {
    Absent,
    Present(String),
}

impl TechniqueDescription {
    pub fn present(text: impl Into<String>) -> Self {
        let text = text.into();
        if text.trim().is_empty() || is_absent_literal(&text) {
            TechniqueDescription::Absent
        } else {
            TechniqueDescription::Present(text)
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            TechniqueDescription::Absent => None,
            TechniqueDescription::Present(s) => Some(s),
        }
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, TechniqueDescription::Absent)
    }
}

fn is_absent_literal(text: &str) -> bool {
    text.trim().eq_ignore_ascii_case("no")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TechniqueAnnotation {
    pub category: TechniqueCategory,
    pub description: TechniqueDescription,
}

/// The `<tech>` block: a forward-looking analysis followed by exactly one
/// annotation per category, stored in category order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsightBlock {
    pub analysis: String,
    techniques: [TechniqueAnnotation; 3],
}

impl InsightBlock {
    pub fn new(
        analysis: impl Into<String>,
        construction: TechniqueDescription,
        theorem_call: TechniqueDescription,
        transformation: TechniqueDescription,
    ) -> Self {
        Self {
            analysis: analysis.into(),
            techniques: [
                TechniqueAnnotation {
                    category: TechniqueCategory::Construction,
                    description: construction,
                },
                TechniqueAnnotation {
                    category: TechniqueCategory::TheoremCall,
                    description: theorem_call,
                },
                TechniqueAnnotation {
                    category: TechniqueCategory::Transformation,
                    description: transformation,
                },
            ],
        }
    }

    pub fn techniques(&self) -> &[TechniqueAnnotation; 3] {
        &self.techniques
    }

    pub fn technique(&self, category: TechniqueCategory) -> &TechniqueDescription {
        &self.techniques[category.index()].description
    }

    /// Number of categories carrying a technique.
    pub fn present_count(&self) -> usize {
        self.techniques
            .iter()
            .filter(|t| !t.description.is_absent())
            .count()
    }

    /// Whether the analysis opens with the guiding statement. A lint only.
    pub fn has_guiding_prefix(&self) -> bool {
        self.analysis.trim_start().starts_with(GUIDING_PREFIX)
    }
}

/// Component subset used by one curriculum stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageView {
    /// Stage 1: question → proof.
    ProofOnly,
    /// Stage 2: question → sketch, proof.
    SketchProof,
    /// Stage 3: question → techniques, sketch, proof.
    Full,
}

impl StageView {
    pub fn stage_number(self) -> u8 {
        match self {
            StageView::ProofOnly => 1,
            StageView::SketchProof => 2,
            StageView::Full => 3,
        }
    }

    fn requires(self, section: Section) -> bool {
        match (self, section) {
            (_, Section::Proof) => true,
            (StageView::ProofOnly, _) => false,
            (StageView::SketchProof, Section::Sketch) => true,
            (StageView::SketchProof, Section::Tech) => false,
            (StageView::Full, _) => true,
        }
    }
}

/// The generated components of a hierarchical response. Invariant: an insight
/// block implies a sketch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hierarchy {
    insight: Option<InsightBlock>,
    sketch: Option<String>,
    proof: String,
}

impl Hierarchy {
    pub fn new(
        insight: Option<InsightBlock>,
        sketch: Option<String>,
        proof: impl Into<String>,
    ) -> Result<Self, RecordError> {
        let proof = proof.into();
        if proof.trim().is_empty() {
            return Err(RecordError::EmptyField("proof"));
        }
        if insight.is_some() && sketch.is_none() {
            return Err(RecordError::InsightWithoutSketch);
        }
        if matches!(&sketch, Some(s) if s.trim().is_empty()) {
            return Err(RecordError::EmptyField("sketch"));
        }
        Ok(Self {
            insight,
            sketch,
            proof,
        })
    }

    pub fn proof_only(proof: impl Into<String>) -> Result<Self, RecordError> {
        Self::new(None, None, proof)
    }

    pub fn insight(&self) -> Option<&InsightBlock> {
        self.insight.as_ref()
    }

    pub fn sketch(&self) -> Option<&str> {
        self.sketch.as_deref()
    }

    pub fn proof(&self) -> &str {
        &self.proof
    }

    /// The richest view this hierarchy can be rendered under.
    pub fn view(&self) -> StageView {
        match (&self.insight, &self.sketch) {
            (Some(_), _) => StageView::Full,
            (None, Some(_)) => StageView::SketchProof,
            (None, None) => StageView::ProofOnly,
        }
    }

    /// Copy restricted to the components of `view`.
    pub fn restrict(&self, view: StageView) -> Result<Hierarchy, RenderError> {
        let insight = match view {
            StageView::Full => Some(self.insight.clone().ok_or(
                RenderError::ViewComponentMissing {
                    component: "tech",
                    view,
                },
            )?),
            _ => None,
        };
        let sketch = match view {
            StageView::ProofOnly => None,
            _ => Some(
                self.sketch
                    .clone()
                    .ok_or(RenderError::ViewComponentMissing {
                        component: "sketch",
                        view,
                    })?,
            ),
        };
        Ok(Hierarchy {
            insight,
            sketch,
            proof: self.proof.clone(),
        })
    }

    pub fn with_proof(&self, proof: impl Into<String>) -> Result<Hierarchy, RecordError> {
        Hierarchy::new(self.insight.clone(), self.sketch.clone(), proof)
    }
}

/// One corpus item: the base theorem-proof pair plus generated components.
/// `base.proof` is the original proof; `sections.proof()` the annotated one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchicalRecord {
    pub base: TheoremRecord,
    pub sections: Hierarchy,
}

impl HierarchicalRecord {
    pub fn new(base: TheoremRecord, sections: Hierarchy) -> Self {
        Self { base, sections }
    }

    pub fn id(&self) -> &str {
        &self.base.id
    }

    pub fn question(&self) -> &str {
        &self.base.question
    }

    pub fn proof(&self) -> &str {
        self.sections.proof()
    }

    pub fn original_proof(&self) -> &str {
        &self.base.proof
    }

    pub fn proof_was_revised(&self) -> bool {
        self.base.proof != self.sections.proof
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("field `{0}` is empty")]
    EmptyField(&'static str),
    #[error("an insight block requires a sketch")]
    InsightWithoutSketch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Section {
    Tech,
    Sketch,
    Proof,
}

impl Section {
    const ALL: [Section; 3] = [Section::Tech, Section::Sketch, Section::Proof];

    fn name(self) -> &'static str {
        match self {
            Section::Tech => "tech",
            Section::Sketch => "sketch",
            Section::Proof => "proof",
        }
    }

    fn open(self) -> &'static str {
        match self {
            Section::Tech => "<tech>",
            Section::Sketch => "<sketch>",
            Section::Proof => "<proof>",
        }
    }

    fn close(self) -> &'static str {
        match self {
            Section::Tech => "</tech>",
            Section::Sketch => "</sketch>",
            Section::Proof => "</proof>",
        }
    }
}

/// Structural parse failure. Every variant names the tag and a byte offset
/// into the input.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("missing section <{tag}> (at byte {offset})")]
    MissingSection { tag: String, offset: usize },
    #[error("duplicate section tag <{tag}> at byte {offset}")]
    DuplicateSection { tag: String, offset: usize },
    #[error("section <{tag}> out of order at byte {offset}")]
    OutOfOrderSections { tag: String, offset: usize },
    #[error("missing category tag <{tag}> in <tech> (block starts at byte {offset})")]
    MissingCategoryTag { tag: String, offset: usize },
    #[error("duplicate category tag <{tag}> at byte {offset}")]
    DuplicateCategoryTag { tag: String, offset: usize },
    #[error("unclosed tag <{tag}> opened at byte {offset}")]
    UnclosedTag { tag: String, offset: usize },
    #[error("section <{tag}> at byte {offset} is empty")]
    EmptySection { tag: String, offset: usize },
    #[error("input is not valid UTF-8 (first bad byte at {offset})")]
    InvalidUtf8 { offset: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ParseWarning {
    /// Non-whitespace text before the first section.
    LeadingText { offset: usize },
    /// Non-whitespace text between two sections.
    InterstitialText { offset: usize },
    /// Non-whitespace text after the last section; ignored.
    TrailingText { offset: usize },
    /// The analysis does not open with the guiding statement.
    MissingGuidingPrefix,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("view {view:?} needs the {component} component, which the record lacks")]
    ViewComponentMissing {
        component: &'static str,
        view: StageView,
    },
    #[error("{field} contains the reserved markup `{markup}`")]
    ReservedMarkup { field: &'static str, markup: String },
}

#[derive(Debug, Clone, Copy)]
struct Span {
    open: usize,
    body_start: usize,
    body_end: usize,
    close_end: usize,
}

fn find_all(haystack_lower: &str, needle: &str) -> Vec<usize> {
    haystack_lower
        .match_indices(needle)
        .map(|(offset, _)| offset)
        .collect()
}

/// Parse a tagged response under `view`. Warnings are discarded; see
/// [`parse_with_warnings`].
pub fn parse_hierarchical(text: &str, view: StageView) -> Result<Hierarchy, ParseError> {
    parse_with_warnings(text, view).map(|(h, _)| h)
}

/// Byte-level entry point: rejects invalid UTF-8 with a structured error.
pub fn parse_hierarchical_bytes(bytes: &[u8], view: StageView) -> Result<Hierarchy, ParseError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ParseError::InvalidUtf8 {
        offset: e.valid_up_to(),
    })?;
    parse_hierarchical(text, view)
}

pub fn parse_with_warnings(
    text: &str,
    view: StageView,
) -> Result<(Hierarchy, Vec<ParseWarning>), ParseError> {
    // Tags are ASCII, so lowercasing keeps byte offsets aligned.
    let lower = text.to_ascii_lowercase();
    let mut spans: Vec<(Section, Span)> = Vec::new();

    for section in Section::ALL {
        let opens = find_all(&lower, section.open());
        let closes = find_all(&lower, section.close());
        if let Some(&dup) = opens.get(1) {
            return Err(ParseError::DuplicateSection {
                tag: section.name().into(),
                offset: dup,
            });
        }
        if let Some(&dup) = closes.get(1) {
            return Err(ParseError::DuplicateSection {
                tag: format!("/{}", section.name()),
                offset: dup,
            });
        }
        match (opens.first(), closes.first()) {
            (None, None) => {}
            (Some(&open), None) => {
                return Err(ParseError::UnclosedTag {
                    tag: section.name().into(),
                    offset: open,
                })
            }
            (None, Some(&close)) => {
                return Err(ParseError::MissingSection {
                    tag: section.name().into(),
                    offset: close,
                })
            }
            (Some(&open), Some(&close)) => {
                if close < open {
                    return Err(ParseError::OutOfOrderSections {
                        tag: format!("/{}", section.name()),
                        offset: close,
                    });
                }
                spans.push((
                    section,
                    Span {
                        open,
                        body_start: open + section.open().len(),
                        body_end: close,
                        close_end: close + section.close().len(),
                    },
                ));
            }
        }
    }

    // A plain, tag-free text is a bare proof, which is how stage-1 targets look.
    if spans.is_empty() && view == StageView::ProofOnly && !contains_any_tag(&lower) {
        let body = text.trim();
        if body.is_empty() {
            return Err(ParseError::MissingSection {
                tag: Section::Proof.name().into(),
                offset: text.len(),
            });
        }
        let hierarchy = Hierarchy::proof_only(body).expect("non-empty proof");
        return Ok((hierarchy, Vec::new()));
    }

    let mut by_position = spans.clone();
    by_position.sort_by_key(|(_, span)| span.open);
    for pair in by_position.windows(2) {
        let (prev_section, prev) = pair[0];
        let (section, span) = pair[1];
        if section < prev_section || span.open < prev.close_end {
            return Err(ParseError::OutOfOrderSections {
                tag: section.name().into(),
                offset: span.open,
            });
        }
    }

    for section in Section::ALL {
        if view.requires(section) && !spans.iter().any(|(s, _)| *s == section) {
            let offset = spans
                .iter()
                .filter(|(s, _)| *s > section)
                .map(|(_, span)| span.open)
                .min()
                .unwrap_or(text.len());
            return Err(ParseError::MissingSection {
                tag: section.name().into(),
                offset,
            });
        }
    }

    let mut warnings = Vec::new();
    let mut cursor = 0;
    for (i, (_, span)) in by_position.iter().enumerate() {
        if let Some(offset) = first_non_whitespace(text, cursor, span.open) {
            warnings.push(if i == 0 {
                ParseWarning::LeadingText { offset }
            } else {
                ParseWarning::InterstitialText { offset }
            });
        }
        cursor = span.close_end;
    }
    if let Some(offset) = first_non_whitespace(text, cursor, text.len()) {
        warnings.push(ParseWarning::TrailingText { offset });
    }

    let span_of = |section: Section| {
        spans
            .iter()
            .find(|(s, _)| *s == section)
            .map(|(_, span)| *span)
    };
    let body = |span: Span| text[span.body_start..span.body_end].trim();
    let non_empty = |section: Section, span: Span| -> Result<String, ParseError> {
        let b = body(span);
        if b.is_empty() {
            Err(ParseError::EmptySection {
                tag: section.name().into(),
                offset: span.open,
            })
        } else {
            Ok(b.to_string())
        }
    };

    let proof_span = span_of(Section::Proof).expect("proof presence checked");
    let proof = non_empty(Section::Proof, proof_span)?;
    let sketch = if view == StageView::ProofOnly {
        None
    } else {
        let span = span_of(Section::Sketch).expect("sketch presence checked");
        Some(non_empty(Section::Sketch, span)?)
    };
    let insight = if view == StageView::Full {
        let span = span_of(Section::Tech).expect("tech presence checked");
        let block = parse_tech_body(text, &lower, span)?;
        if !block.has_guiding_prefix() {
            warnings.push(ParseWarning::MissingGuidingPrefix);
        }
        Some(block)
    } else {
        None
    };

    let hierarchy = Hierarchy {
        insight,
        sketch,
        proof,
    };
    Ok((hierarchy, warnings))
}

fn contains_any_tag(lower: &str) -> bool {
    Section::ALL
        .iter()
        .any(|s| lower.contains(s.open()) || lower.contains(s.close()))
}

fn first_non_whitespace(text: &str, from: usize, to: usize) -> Option<usize> {
    text[from..to]
        .char_indices()
        .find(|(_, c)| !c.is_whitespace())
        .map(|(i, _)| from + i)
}

fn parse_tech_body(text: &str, lower: &str, span: Span) -> Result<InsightBlock, ParseError> {
    let body_lower = &lower[span.body_start..span.body_end];
    let mut tags: Vec<(TechniqueCategory, usize, usize)> = Vec::with_capacity(3);
    for category in TechniqueCategory::ALL {
        let tag = format!("<{}>", category.tag_name());
        let hits = find_all(body_lower, &tag);
        match hits.as_slice() {
            [] => {
                return Err(ParseError::MissingCategoryTag {
                    tag: category.tag_name().into(),
                    offset: span.open,
                })
            }
            [only] => {
                let start = span.body_start + only;
                tags.push((category, start, start + tag.len()));
            }
            [_, second, ..] => {
                return Err(ParseError::DuplicateCategoryTag {
                    tag: category.tag_name().into(),
                    offset: span.body_start + second,
                })
            }
        }
    }
    tags.sort_by_key(|&(_, start, _)| start);

    let analysis = text[span.body_start..tags[0].1].trim().to_string();
    let mut descriptions: [TechniqueDescription; 3] = [
        TechniqueDescription::Absent,
        TechniqueDescription::Absent,
        TechniqueDescription::Absent,
    ];
    for (i, &(category, _, tag_end)) in tags.iter().enumerate() {
        let end = tags.get(i + 1).map_or(span.body_end, |t| t.1);
        let raw = text[tag_end..end].trim_start();
        let raw = raw.strip_prefix(':').unwrap_or(raw).trim();
        descriptions[category.index()] = TechniqueDescription::present(raw);
    }
    let [construction, theorem_call, transformation] = descriptions;
    Ok(InsightBlock::new(
        analysis,
        construction,
        theorem_call,
        transformation,
    ))
}

/// Canonical tagged rendering of the components selected by `view`.
/// Section tags and technique labels have no escape form, so payloads may not
/// contain them.
fn check_payload(field: &'static str, text: &str) -> Result<(), RenderError> {
    let sections = ["tech", "sketch", "proof"]
        .into_iter()
        .flat_map(|t| [format!("<{t}>"), format!("</{t}>")]);
    let labels = TechniqueCategory::ALL
        .into_iter()
        .map(|c| format!("<{}>:", c.tag_name()));
    match sections.chain(labels).find(|m| text.contains(m.as_str())) {
        Some(markup) => Err(RenderError::ReservedMarkup { field, markup }),
        None => Ok(()),
    }
}

pub fn render_hierarchical(sections: &Hierarchy, view: StageView) -> Result<String, RenderError> {
    let restricted = sections.restrict(view)?;
    if let Some(insight) = &restricted.insight {
        check_payload("analysis", &insight.analysis)?;
        for annotation in insight.techniques() {
            if let TechniqueDescription::Present(text) = &annotation.description {
                check_payload(annotation.category.json_key(), text)?;
            }
        }
    }
    if let Some(sketch) = &restricted.sketch {
        check_payload("sketch", sketch)?;
    }
    check_payload("proof", &restricted.proof)?;
    let mut out = String::new();
    if let Some(insight) = &restricted.insight {
        out.push_str("<tech>\n");
        if !insight.analysis.trim().is_empty() {
            out.push_str(insight.analysis.trim());
            out.push('\n');
        }
        for annotation in insight.techniques() {
            out.push('<');
            out.push_str(annotation.category.tag_name());
            out.push_str(">: ");
            match &annotation.description {
                TechniqueDescription::Absent => out.push_str("no"),
                TechniqueDescription::Present(text) => out.push_str(text.trim()),
            }
            out.push('\n');
        }
        out.push_str("</tech>\n");
    }
    if let Some(sketch) = &restricted.sketch {
        out.push_str("<sketch>\n");
        out.push_str(sketch.trim());
        out.push_str("\n</sketch>\n");
    }
    out.push_str("<proof>\n");
    out.push_str(restricted.proof.trim());
    out.push_str("\n</proof>");
    Ok(out)
}

/// Render a record's own sections (convenience over [`render_hierarchical`]).
pub fn render_record(record: &HierarchicalRecord, view: StageView) -> Result<String, RenderError> {
    render_hierarchical(&record.sections, view)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("schema violation at {pointer}: {message}")]
    SchemaViolation { pointer: String, message: String },
}

fn violation(pointer: &str, message: impl Into<String>) -> SchemaError {
    SchemaError::SchemaViolation {
        pointer: pointer.to_string(),
        message: message.into(),
    }
}

fn required_string(
    obj: &Map<String, Value>,
    key: &str,
    pointer: &str,
) -> Result<String, SchemaError> {
    match obj.get(key) {
        None | Some(Value::Null) => Err(violation(pointer, "required string is missing")),
        Some(Value::String(s)) if s.trim().is_empty() => {
            Err(violation(pointer, "must not be empty"))
        }
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(violation(pointer, "expected a string")),
    }
}

fn optional_string(
    obj: &Map<String, Value>,
    key: &str,
    pointer: &str,
) -> Result<Option<String>, SchemaError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(violation(pointer, "expected a string or null")),
    }
}

/// Parse one line of a base corpus: `{"id","question","proof"}`.
pub fn parse_theorem_line(json_text: &str) -> Result<TheoremRecord, SchemaError> {
    let value: Value =
        serde_json::from_str(json_text).map_err(|e| SchemaError::Json(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| violation("", "expected an object"))?;
    Ok(TheoremRecord {
        id: required_string(obj, "id", "/id")?,
        question: required_string(obj, "question", "/question")?,
        proof: required_string(obj, "proof", "/proof")?,
    })
}

/// Parse one line of the hierarchical corpus JSONL schema.
pub fn parse_corpus_line(json_text: &str) -> Result<HierarchicalRecord, SchemaError> {
    let value: Value =
        serde_json::from_str(json_text).map_err(|e| SchemaError::Json(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| violation("", "expected an object"))?;
    let id = required_string(obj, "id", "/id")?;
    let question = required_string(obj, "question", "/question")?;
    let proof = required_string(obj, "proof", "/proof")?;
    let sketch = optional_string(obj, "sketch", "/sketch")?;
    if matches!(&sketch, Some(s) if s.trim().is_empty()) {
        return Err(violation("/sketch", "must not be empty"));
    }
    let original_proof = optional_string(obj, "original_proof", "/original_proof")?;

    let insight = match obj.get("tech") {
        None | Some(Value::Null) => None,
        Some(Value::Object(tech)) => {
            let analysis = optional_string(tech, "analysis", "/tech/analysis")?.unwrap_or_default();
            let mut descriptions = Vec::with_capacity(3);
            for category in TechniqueCategory::ALL {
                let pointer = format!("/tech/{}", category.json_key());
                let description = match optional_string(tech, category.json_key(), &pointer)? {
                    None => TechniqueDescription::Absent,
                    Some(s) if s.trim().is_empty() => {
                        return Err(violation(&pointer, "use null for an absent technique"))
                    }
                    Some(s) => TechniqueDescription::present(s),
                };
                descriptions.push(description);
            }
            let transformation = descriptions.pop().expect("three entries");
            let theorem_call = descriptions.pop().expect("three entries");
            let construction = descriptions.pop().expect("three entries");
            Some(InsightBlock::new(
                analysis,
                construction,
                theorem_call,
                transformation,
            ))
        }
        Some(_) => return Err(violation("/tech", "expected an object or null")),
    };
    if insight.is_some() && sketch.is_none() {
        return Err(violation("/sketch", "required when tech is present"));
    }

    let base = TheoremRecord {
        id,
        question,
        proof: original_proof.unwrap_or_else(|| proof.clone()),
    };
    let sections = Hierarchy {
        insight,
        sketch,
        proof,
    };
    Ok(HierarchicalRecord { base, sections })
}

#[derive(Serialize)]
struct CorpusLine<'a> {
    id: &'a str,
    question: &'a str,
    proof: &'a str,
    tech: Option<TechLine<'a>>,
    sketch: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    original_proof: Option<&'a str>,
}

#[derive(Serialize)]
struct TechLine<'a> {
    analysis: &'a str,
    construction: Option<&'a str>,
    theorem_call: Option<&'a str>,
    transformation: Option<&'a str>,
}

/// Serialize a record as one corpus JSONL line (no trailing newline).
pub fn render_corpus_line(record: &HierarchicalRecord) -> String {
    let tech = record.sections.insight().map(|insight| TechLine {
        analysis: &insight.analysis,
        construction: insight.technique(TechniqueCategory::Construction).as_text(),
        theorem_call: insight.technique(TechniqueCategory::TheoremCall).as_text(),
        transformation: insight
            .technique(TechniqueCategory::Transformation)
            .as_text(),
    });
    let line = CorpusLine {
        id: &record.base.id,
        question: &record.base.question,
        proof: record.sections.proof(),
        tech,
        sketch: record.sections.sketch(),
        original_proof: record
            .proof_was_revised()
            .then_some(record.base.proof.as_str()),
    };
    serde_json::to_string(&line).expect("corpus line serializes")
}
