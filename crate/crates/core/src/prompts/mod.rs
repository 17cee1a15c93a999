//! Prompt templates and rendering.
//!
//! Templates are plain UTF-8 text with `{placeholder}` slots, one file per
//! [`TemplateId`] and a `manifest.json` that maps ids to files and versions.
//! The default set is compiled in; [`TemplateSet::load_dir`] swaps in a
//! directory on disk. Substitution is a single pass over the parsed
//! template, so braces inside source or translation text are never
//! re-expanded. `{{` and `}}` produce literal braces.

mod icl;

pub use icl::{select_icl_exemplars, IclConfig, IclSelection};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LangPair, ScoreBin, Segment};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("placeholder `{{{0}}}` left unresolved")]
    PlaceholderUnresolved(String),
    #[error("template {id} must contain `{{{name}}}` exactly once (found {count})")]
    PlaceholderCount {
        id: TemplateId,
        name: &'static str,
        count: usize,
    },
    #[error("template {id} lacks the guideline clause for range {range}")]
    MissingGuideline { id: TemplateId, range: &'static str },
    #[error("template {0} cannot be used for this kind of prompt")]
    WrongTemplateKind(TemplateId),
    #[error("template {id} expects {expected} exemplars, got {got}")]
    ExemplarCountMismatch {
        id: TemplateId,
        expected: usize,
        got: usize,
    },
    #[error("score bin {0} has too few training segments")]
    EmptyBin(ScoreBin),
    #[error("training split is empty")]
    EmptyTrain,
    #[error("segment {0} is from the test split and cannot serve as an exemplar")]
    TestSplitExemplar(u64),
    #[error("template missing: {0}")]
    TemplateMissing(String),
    #[error("template manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

/// Prompt family and in-context variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateId {
    #[serde(rename = "gemba")]
    Gemba,
    #[serde(rename = "te")]
    Te,
    #[serde(rename = "ag")]
    Ag,
    #[serde(rename = "ag-icl3")]
    AgIcl3,
    #[serde(rename = "ag-icl5")]
    AgIcl5,
    #[serde(rename = "ag-icl7")]
    AgIcl7,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::Gemba,
        TemplateId::Te,
        TemplateId::Ag,
        TemplateId::AgIcl3,
        TemplateId::AgIcl5,
        TemplateId::AgIcl7,
    ];

    pub fn key(self) -> &'static str {
        match self {
            TemplateId::Gemba => "gemba",
            TemplateId::Te => "te",
            TemplateId::Ag => "ag",
            TemplateId::AgIcl3 => "ag-icl3",
            TemplateId::AgIcl5 => "ag-icl5",
            TemplateId::AgIcl7 => "ag-icl7",
        }
    }

    /// Row label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            TemplateId::Gemba => "0-shot-GEMBA",
            TemplateId::Te => "0-shot-TE",
            TemplateId::Ag => "0-shot-AG",
            TemplateId::AgIcl3 => "3-ICL-AG",
            TemplateId::AgIcl5 => "5-ICL-AG",
            TemplateId::AgIcl7 => "7-ICL-AG",
        }
    }

    pub fn icl_config(self) -> Option<IclConfig> {
        match self {
            TemplateId::AgIcl3 => Some(IclConfig::Icl3),
            TemplateId::AgIcl5 => Some(IclConfig::Icl5),
            TemplateId::AgIcl7 => Some(IclConfig::Icl7),
            _ => None,
        }
    }

    pub fn is_icl(self) -> bool {
        self.icl_config().is_some()
    }

    pub fn exemplar_count(self) -> usize {
        self.icl_config().map_or(0, IclConfig::count)
    }

    /// AG-family templates carry the five score-range guideline clauses.
    pub fn is_ag_family(self) -> bool {
        !matches!(self, TemplateId::Gemba | TemplateId::Te)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        TemplateId::ALL
            .into_iter()
            .find(|t| t.key() == lower || t.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| PromptError::TemplateMissing(s.to_owned()))
    }
}

// ---------------------------------------------------------------------------
// Template parsing

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    SourceLang,
    TargetLang,
    SourceText,
    TranslationText,
    Examples,
}

impl Slot {
    const ALL: [Slot; 5] = [
        Slot::SourceLang,
        Slot::TargetLang,
        Slot::SourceText,
        Slot::TranslationText,
        Slot::Examples,
    ];

    fn name(self) -> &'static str {
        match self {
            Slot::SourceLang => "source_lang",
            Slot::TargetLang => "target_lang",
            Slot::SourceText => "source_text",
            Slot::TranslationText => "translation_text",
            Slot::Examples => "examples",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Text(String),
    Slot(Slot),
    Unknown(String),
}

fn parse_body(body: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut lit = String::new();
    let mut rest = body;
    while let Some(pos) = rest.find(['{', '}']) {
        lit.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            lit.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('{') {
            if let Some(end) = tail.find('}') {
                let name = &tail[1..end];
                if !name.is_empty() && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
                    if !lit.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut lit)));
                    }
                    pieces.push(match Slot::ALL.into_iter().find(|s| s.name() == name) {
                        Some(slot) => Piece::Slot(slot),
                        None => Piece::Unknown(name.to_owned()),
                    });
                    rest = &tail[end + 1..];
                    continue;
                }
            }
        }
        lit.push_str(&tail[..1]);
        rest = &tail[1..];
    }
    lit.push_str(rest);
    if !lit.is_empty() {
        pieces.push(Piece::Text(lit));
    }
    pieces
}

/// A validated prompt template.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
    pub version: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    /// Parses and validates a template body: every slot the template kind
    /// needs must appear exactly once, `{examples}` only in ICL variants, and
    /// AG-family bodies must spell out all five score ranges.
    pub fn new(id: TemplateId, body: impl Into<String>, version: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        let pieces = parse_body(&body);
        if let Some(Piece::Unknown(name)) = pieces.iter().find(|p| matches!(p, Piece::Unknown(_))) {
            return Err(PromptError::PlaceholderUnresolved(name.clone()));
        }
        for slot in Slot::ALL {
            let count = pieces.iter().filter(|p| **p == Piece::Slot(slot)).count();
            let expected = if slot == Slot::Examples && !id.is_icl() { 0 } else { 1 };
            if count != expected {
                return Err(PromptError::PlaceholderCount {
                    id,
                    name: slot.name(),
                    count,
                });
            }
        }
        if id.is_ag_family() {
            for bin in ScoreBin::ALL {
                if !body.contains(bin.label()) {
                    return Err(PromptError::MissingGuideline {
                        id,
                        range: bin.label(),
                    });
                }
            }
        }
        Ok(PromptTemplate {
            id,
            body,
            version: version.into(),
            pieces,
        })
    }

    fn substitute(&self, values: &SlotValues<'_>) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len() + 256);
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(slot) => {
                    let v = values
                        .get(*slot)
                        .ok_or_else(|| PromptError::PlaceholderUnresolved(slot.name().to_owned()))?;
                    out.push_str(v);
                }
                Piece::Unknown(name) => return Err(PromptError::PlaceholderUnresolved(name.clone())),
            }
        }
        Ok(out)
    }
}

struct SlotValues<'a> {
    source_lang: &'a str,
    target_lang: &'a str,
    source_text: &'a str,
    translation_text: &'a str,
    examples: Option<&'a str>,
}

impl SlotValues<'_> {
    fn get(&self, slot: Slot) -> Option<&str> {
        match slot {
            Slot::SourceLang => Some(self.source_lang),
            Slot::TargetLang => Some(self.target_lang),
            Slot::SourceText => Some(self.source_text),
            Slot::TranslationText => Some(self.translation_text),
            Slot::Examples => self.examples,
        }
    }
}

// ---------------------------------------------------------------------------
// Template sets

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    id: TemplateId,
    file: PathBuf,
    version: String,
}

const BUILTIN_MANIFEST: &str = include_str!("../../templates/manifest.json");

fn builtin_file(name: &str) -> Option<&'static str> {
    match name {
        "gemba.txt" => Some(include_str!("../../templates/gemba.txt")),
        "te.txt" => Some(include_str!("../../templates/te.txt")),
        "ag.txt" => Some(include_str!("../../templates/ag.txt")),
        "ag_icl.txt" => Some(include_str!("../../templates/ag_icl.txt")),
        _ => None,
    }
}

/// The templates available to a run, keyed by id.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(BUILTIN_MANIFEST).expect("built-in template manifest is valid");
        let templates = entries
            .into_iter()
            .map(|e| {
                let name = e.file.to_string_lossy();
                let body = builtin_file(&name).expect("built-in template file exists");
                let t = PromptTemplate::new(e.id, body, e.version).expect("built-in template is valid");
                (t.id, t)
            })
            .collect();
        TemplateSet { templates }
    }

    /// Loads `manifest.json` and the files it names from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|_| PromptError::TemplateMissing(manifest_path.display().to_string()))?;
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| PromptError::Manifest {
                path: manifest_path.clone(),
                message: e.to_string(),
            })?;
        let mut templates = BTreeMap::new();
        for e in entries {
            let path = dir.join(&e.file);
            let body = std::fs::read_to_string(&path)
                .map_err(|_| PromptError::TemplateMissing(path.display().to_string()))?;
            let t = PromptTemplate::new(e.id, body, e.version)?;
            templates.insert(t.id, t);
        }
        Ok(TemplateSet { templates })
    }

    pub fn get(&self, id: TemplateId) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(&id)
            .ok_or_else(|| PromptError::TemplateMissing(id.to_string()))
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.id, template);
    }
}

// ---------------------------------------------------------------------------
// Rendering

/// Full English name for an ISO-639-1 code; unknown codes are returned as-is.
pub fn language_name(code: &str) -> &str {
    match code {
        "en" => "English",
        "gu" => "Gujarati",
        "hi" => "Hindi",
        "mr" => "Marathi",
        "ta" => "Tamil",
        "te" => "Telugu",
        "et" => "Estonian",
        "ne" => "Nepali",
        "si" => "Sinhala",
        "de" => "German",
        "zh" => "Chinese",
        "ro" => "Romanian",
        other => other,
    }
}

/// A training segment used as a scored in-context example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclExemplar {
    pub segment: Segment,
    pub bin: ScoreBin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub template: TemplateId,
    pub template_version: String,
    pub text: String,
    pub exemplars: Vec<IclExemplar>,
    pub target_segment_id: u64,
    pub pair: LangPair,
    pub seed: u64,
}

/// One line of a rendered-prompt dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDump {
    pub pair: LangPair,
    pub segment_id: u64,
    pub template: TemplateId,
    pub seed: u64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exemplar_ids: Vec<u64>,
}

impl From<&RenderedPrompt> for PromptDump {
    fn from(p: &RenderedPrompt) -> Self {
        PromptDump {
            pair: p.pair.clone(),
            segment_id: p.target_segment_id,
            template: p.template,
            seed: p.seed,
            text: p.text.clone(),
            exemplar_ids: p.exemplars.iter().map(|e| e.segment.id).collect(),
        }
    }
}

/// Renders a zero-shot prompt (GEMBA, TE or AG).
pub fn render_zero_shot(
    template: &PromptTemplate,
    segment: &Segment,
    seed: u64,
) -> Result<RenderedPrompt, PromptError> {
    if template.id.is_icl() {
        return Err(PromptError::WrongTemplateKind(template.id));
    }
    let text = template.substitute(&SlotValues {
        source_lang: language_name(segment.pair.source()),
        target_lang: language_name(segment.pair.target()),
        source_text: &segment.source,
        translation_text: &segment.translation,
        examples: None,
    })?;
    Ok(RenderedPrompt {
        template: template.id,
        template_version: template.version.clone(),
        text,
        exemplars: Vec::new(),
        target_segment_id: segment.id,
        pair: segment.pair.clone(),
        seed,
    })
}

/// Gold scores in the examples block are shown with one decimal.
pub fn format_score(score: f64) -> String {
    format!("{score:.1}")
}

fn examples_block(exemplars: &[IclExemplar], source_lang: &str, target_lang: &str) -> String {
    exemplars
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            format!(
                "Example {}:\n{source_lang} source: {}\n{target_lang} translation: {}\nScore: {}",
                i + 1,
                ex.segment.source,
                ex.segment.translation,
                format_score(ex.segment.da_mean)
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Renders an in-context prompt. Exemplars are written in ascending bin
/// order (stable within a bin), followed by the unscored target segment.
pub fn render_icl(
    template: &PromptTemplate,
    exemplars: &[IclExemplar],
    segment: &Segment,
    seed: u64,
) -> Result<RenderedPrompt, PromptError> {
    let Some(config) = template.id.icl_config() else {
        return Err(PromptError::WrongTemplateKind(template.id));
    };
    if exemplars.len() != config.count() {
        return Err(PromptError::ExemplarCountMismatch {
            id: template.id,
            expected: config.count(),
            got: exemplars.len(),
        });
    }
    if let Some(ex) = exemplars.iter().find(|e| e.segment.split != crate::corpus::Split::Train) {
        return Err(PromptError::TestSplitExemplar(ex.segment.id));
    }
    let mut ordered = exemplars.to_vec();
    ordered.sort_by_key(|e| e.bin);
    let source_lang = language_name(segment.pair.source());
    let target_lang = language_name(segment.pair.target());
    let block = examples_block(&ordered, source_lang, target_lang);
    let text = template.substitute(&SlotValues {
        source_lang,
        target_lang,
        source_text: &segment.source,
        translation_text: &segment.translation,
        examples: Some(&block),
    })?;
    Ok(RenderedPrompt {
        template: template.id,
        template_version: template.version.clone(),
        text,
        exemplars: ordered,
        target_segment_id: segment.id,
        pair: segment.pair.clone(),
        seed,
    })
}
