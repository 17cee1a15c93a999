//! Run manifests and the end-to-end runner.
//!
//! A run directory looks like this:
//!
//! ```text
//! <out_dir>/
//!   manifest.json            resolved manifest, out_dir written as "."
//!   reports.json             every successful CorrelationReport
//!   cells.json               per-cell counts and errors
//!   run.log                  timestamps; the only non-deterministic file
//!   cells/<pair>_<template>_v<version>_s<seed>_<model>/
//!     prompts.jsonl outputs.jsonl extractions.jsonl ledger.json report.json
//! ```
//!
//! Cell directory names carry template version, seed and model, so a resumed
//! run finds earlier outputs and only re-dispatches prompts without an `Ok`
//! output.

pub mod table;
pub mod worst;

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, CorpusManifest, LangPair, LoadMode, Segment};
use crate::extraction::{extract_one, ledgers_for, ExclusionLedger, ExtractionResult};
use crate::fertility::{FertilityError, TokenizerHandle, TokenizerSpec};
use crate::gateway::{Backend, Gateway, HttpBackend, InferenceConfig, MockBackend, MockPolicy, ModelOutput};
use crate::io;
use crate::metrics::{evaluate, CorrelationReport, MetricsError, RunMeta};
use crate::prompts::{render_icl, select_icl_exemplars, render_zero_shot, PromptDump, PromptError, RenderedPrompt, TemplateId, TemplateSet};

pub const MANIFEST_COPY: &str = "manifest.json";
pub const REPORTS_FILE: &str = "reports.json";
pub const CELLS_FILE: &str = "cells.json";
pub const LOG_FILE: &str = "run.log";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const OUTPUTS_FILE: &str = "outputs.jsonl";
pub const EXTRACTIONS_FILE: &str = "extractions.jsonl";
pub const LEDGER_FILE: &str = "ledger.json";
pub const REPORT_FILE: &str = "report.json";
pub const WORST_FILE: &str = "worst.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("run manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("template missing: {0}")]
    TemplateMissing(String),
    #[error("no endpoint_url configured and no mock backend requested")]
    EndpointMissing,
    #[error("pair {0} is not in the corpus manifest")]
    UnknownPair(LangPair),
    #[error("inference config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {message}")]
    RunDirectory { path: PathBuf, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(PromptError),
    #[error(transparent)]
    Fertility(#[from] FertilityError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<PromptError> for PipelineError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::TemplateMissing(what) => PipelineError::TemplateMissing(what),
            other => PipelineError::Prompt(other),
        }
    }
}

/// Everything that determines a run, up to endpoint nondeterminism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// JSONL corpus manifest.
    pub corpora: PathBuf,
    /// Pairs to run; empty means every pair in the corpus manifest.
    #[serde(default)]
    pub pairs: Vec<LangPair>,
    pub templates: Vec<TemplateId>,
    #[serde(default)]
    pub seed: u64,
    /// Borrow from the nearest bin when a score bin is empty.
    #[serde(default)]
    pub icl_fallback: bool,
    #[serde(default)]
    pub inference: InferenceConfig,
    /// Use the mock backend with this policy instead of an endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockPolicy>,
    #[serde(default)]
    pub mock_delay_ms: u64,
    /// Directory with `manifest.json` and template files; built-ins if unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_dir: Option<PathBuf>,
    /// Tokenizer used for the pre-dispatch context check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<TokenizerSpec>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub resume: bool,
    #[serde(default)]
    pub load_mode: LoadMode,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Manifest {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let mut m: RunManifest = serde_json::from_str(&text).map_err(|e| PipelineError::Manifest {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        m.base_dir = path.parent().map(Path::to_owned).unwrap_or_default();
        m.validate().map_err(|message| PipelineError::Manifest {
            path: path.to_owned(),
            message,
        })?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.templates.is_empty() {
            return Err("no templates listed".into());
        }
        self.inference.validate()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn corpora_path(&self) -> PathBuf {
        self.resolve(&self.corpora)
    }

    pub fn out_path(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    pub fn template_set(&self) -> Result<TemplateSet, PipelineError> {
        let set = match &self.template_dir {
            Some(dir) => TemplateSet::load_dir(&self.resolve(dir))?,
            None => TemplateSet::builtin(),
        };
        for &id in &self.templates {
            set.get(id)?;
        }
        Ok(set)
    }

    /// Loads the selected corpora, failing on the first corpus error.
    pub fn load_corpora(&self) -> Result<Vec<Corpus>, PipelineError> {
        let manifest = CorpusManifest::load(&self.corpora_path())?;
        let entries: Vec<_> = if self.pairs.is_empty() {
            manifest.entries.iter().collect()
        } else {
            self.pairs
                .iter()
                .map(|p| manifest.entry(p).ok_or_else(|| PipelineError::UnknownPair(p.clone())))
                .collect::<Result<_, _>>()?
        };
        entries
            .into_iter()
            .map(|e| {
                let (corpus, diags) = manifest.load_entry(e, self.load_mode)?;
                for (split, d) in diags {
                    log::warn!("{} {split:?} row {}: {:?}", e.pair, d.row, d.reason);
                }
                Ok(corpus)
            })
            .collect()
    }

    /// The model label used in file names and reports.
    pub fn model(&self) -> &str {
        &self.inference.model_name
    }

    /// A copy whose out_dir points at the run directory itself, so the copy
    /// does not depend on where the run was written.
    fn portable(&self) -> RunManifest {
        RunManifest {
            out_dir: PathBuf::from("."),
            ..self.clone()
        }
    }
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-') { c } else { '_' })
        .collect()
}

/// Directory name for one (pair, template) cell of a run.
pub fn cell_key(pair: &LangPair, template: TemplateId, version: &str, seed: u64, model: &str) -> String {
    format!("{pair}_{}_v{}_s{seed}_{}", template.key(), slug(version), slug(model))
}

/// Renders every test prompt for one cell. ICL cells draw one exemplar set
/// per (pair, seed) and reuse it for all test segments.
pub fn render_cell(
    templates: &TemplateSet,
    corpus: &Corpus,
    template: TemplateId,
    seed: u64,
    icl_fallback: bool,
) -> Result<(Vec<RenderedPrompt>, Vec<String>), PipelineError> {
    let t = templates.get(template)?;
    match template.icl_config() {
        None => {
            let prompts = corpus
                .test
                .iter()
                .map(|s| render_zero_shot(t, s, seed))
                .collect::<Result<_, _>>()?;
            Ok((prompts, Vec::new()))
        }
        Some(config) => {
            let selection = select_icl_exemplars(&corpus.train, config, seed, icl_fallback)?;
            let prompts = crate::par::map(&corpus.test, |s| render_icl(t, &selection.exemplars, s, seed))
                .into_iter()
                .collect::<Result<_, _>>()?;
            Ok((prompts, selection.warnings))
        }
    }
}

/// Builds the backend named by the manifest: the mock when `mock` is set,
/// otherwise the HTTP client, which needs `endpoint_url`.
pub fn backend_for(manifest: &RunManifest, corpora: &[Corpus]) -> Result<Arc<dyn Backend>, PipelineError> {
    if let Some(policy) = &manifest.mock {
        let gold: Vec<Segment> = corpora.iter().flat_map(|c| c.test.iter().cloned()).collect();
        let mock = MockBackend::new(policy.clone(), manifest.seed)
            .with_gold(&gold)
            .with_delay(Duration::from_millis(manifest.mock_delay_ms));
        return Ok(Arc::new(mock));
    }
    if manifest.inference.endpoint_url.is_none() {
        return Err(PipelineError::EndpointMissing);
    }
    let http = HttpBackend::new(&manifest.inference).map_err(PipelineError::InvalidConfig)?;
    Ok(Arc::new(http))
}

/// Outcome of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub pair: LangPair,
    pub template: TemplateId,
    pub key: String,
    pub prompts: usize,
    /// Prompts sent to the backend in this invocation.
    pub dispatched: usize,
    /// Prompts answered from persisted outputs.
    pub reused: usize,
    pub excluded: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub cells: Vec<CellSummary>,
    pub reports: Vec<CorrelationReport>,
}

impl RunSummary {
    pub fn dispatched(&self) -> usize {
        self.cells.iter().map(|c| c.dispatched).sum()
    }
}

struct RunLog(PathBuf);

impl RunLog {
    fn line(&self, msg: &str) {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let res = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.0)
            .and_then(|mut f| writeln!(f, "{}.{:03} {msg}", ts.as_secs(), ts.subsec_millis()));
        if let Err(e) = res {
            log::warn!("cannot write {}: {e}", self.0.display());
        }
    }
}

fn read_previous_outputs(path: &Path) -> Result<HashMap<u64, ModelOutput>, PipelineError> {
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let outputs: Vec<ModelOutput> = io::read_jsonl(path).map_err(|e| PipelineError::RunDirectory {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    Ok(outputs
        .into_iter()
        .filter(|o| o.status.is_ok())
        .map(|o| (o.prompt_ref.segment_id, o))
        .collect())
}

/// Runs with the backend the manifest names.
pub fn run(manifest: &RunManifest) -> Result<RunSummary, PipelineError> {
    let templates = manifest.template_set()?;
    let corpora = manifest.load_corpora()?;
    let backend = backend_for(manifest, &corpora)?;
    run_loaded(manifest, &templates, &corpora, backend)
}

/// Runs against a caller-supplied backend.
pub fn run_with_backend(manifest: &RunManifest, backend: Arc<dyn Backend>) -> Result<RunSummary, PipelineError> {
    let templates = manifest.template_set()?;
    let corpora = manifest.load_corpora()?;
    run_loaded(manifest, &templates, &corpora, backend)
}

fn run_loaded(
    manifest: &RunManifest,
    templates: &TemplateSet,
    corpora: &[Corpus],
    backend: Arc<dyn Backend>,
) -> Result<RunSummary, PipelineError> {
    manifest.validate().map_err(PipelineError::InvalidConfig)?;
    let out = manifest.out_path();
    std::fs::create_dir_all(out.join("cells"))?;
    let log = RunLog(out.join(LOG_FILE));
    log.line(&format!("start seed={} resume={}", manifest.seed, manifest.resume));
    io::write_json_pretty(&out.join(MANIFEST_COPY), &manifest.portable())?;

    let mut gateway = Gateway::new(manifest.inference.clone(), backend);
    if let Some(spec) = &manifest.tokenizer {
        let spec = TokenizerSpec {
            path: manifest.resolve(&spec.path),
            ..spec.clone()
        };
        gateway = gateway.with_token_counter(Arc::new(TokenizerHandle::from_spec(&spec)?));
    }

    let model = manifest.model();
    let mut cells = Vec::new();
    let mut reports = Vec::new();
    for corpus in corpora {
        for &template in &manifest.templates {
            let version = &templates.get(template)?.version;
            let key = cell_key(&corpus.pair, template, version, manifest.seed, model);
            let dir = out.join("cells").join(&key);
            std::fs::create_dir_all(&dir)?;

            let (prompts, warnings) = render_cell(templates, corpus, template, manifest.seed, manifest.icl_fallback)?;
            for w in &warnings {
                log::warn!("{}: {w}", corpus.pair);
            }
            let dumps: Vec<PromptDump> = prompts.iter().map(PromptDump::from).collect();
            io::write_jsonl(&dir.join(PROMPTS_FILE), &dumps)?;

            let previous = if manifest.resume {
                read_previous_outputs(&dir.join(OUTPUTS_FILE))?
            } else {
                HashMap::new()
            };
            let pending: Vec<RenderedPrompt> = prompts
                .iter()
                .filter(|p| !previous.contains_key(&p.target_segment_id))
                .cloned()
                .collect();
            let mut fresh = gateway.complete_batch(&pending).into_iter();
            let outputs: Vec<ModelOutput> = prompts
                .iter()
                .map(|p| match previous.get(&p.target_segment_id) {
                    Some(o) => o.clone(),
                    None => fresh.next().expect("one output per pending prompt"),
                })
                .collect();
            io::write_jsonl(&dir.join(OUTPUTS_FILE), &outputs)?;

            let results: Vec<ExtractionResult> = crate::par::map(&outputs, extract_one);
            io::write_jsonl(&dir.join(EXTRACTIONS_FILE), &results)?;
            let ledger = ledgers_for(&results, model)
                .into_iter()
                .next()
                .unwrap_or_else(|| ExclusionLedger::new(corpus.pair.clone(), template, model));
            io::write_json_pretty(&dir.join(LEDGER_FILE), &ledger)?;

            let meta = RunMeta {
                pair: corpus.pair.clone(),
                template,
                model: model.to_owned(),
            };
            let error = match evaluate(&corpus.test, &results, &meta) {
                Ok(report) => {
                    io::write_json_pretty(&dir.join(REPORT_FILE), &report)?;
                    reports.push(report);
                    None
                }
                Err(e) => {
                    let stale = dir.join(REPORT_FILE);
                    if stale.exists() {
                        std::fs::remove_file(stale)?;
                    }
                    Some(e.to_string())
                }
            };
            log.line(&format!(
                "{key} prompts={} dispatched={} reused={}",
                prompts.len(),
                pending.len(),
                prompts.len() - pending.len()
            ));
            cells.push(CellSummary {
                pair: corpus.pair.clone(),
                template,
                key,
                prompts: prompts.len(),
                dispatched: pending.len(),
                reused: prompts.len() - pending.len(),
                excluded: ledger.excluded_count,
                warnings,
                error,
            });
        }
    }
    io::write_json_pretty(&out.join(REPORTS_FILE), &reports)?;
    io::write_json_pretty(&out.join(CELLS_FILE), &cells)?;
    log.line("done");
    Ok(RunSummary {
        out_dir: out,
        cells,
        reports,
    })
}

/// Renders and writes prompts for every cell without running inference.
/// Returns `(cell key, prompt count)` pairs.
pub fn render_only(manifest: &RunManifest) -> Result<Vec<(String, usize)>, PipelineError> {
    let templates = manifest.template_set()?;
    let corpora = manifest.load_corpora()?;
    let out = manifest.out_path();
    let mut written = Vec::new();
    for corpus in &corpora {
        for &template in &manifest.templates {
            let version = &templates.get(template)?.version;
            let key = cell_key(&corpus.pair, template, version, manifest.seed, manifest.model());
            let dir = out.join("cells").join(&key);
            std::fs::create_dir_all(&dir)?;
            let (prompts, _) = render_cell(&templates, corpus, template, manifest.seed, manifest.icl_fallback)?;
            let dumps: Vec<PromptDump> = prompts.iter().map(PromptDump::from).collect();
            io::write_jsonl(&dir.join(PROMPTS_FILE), &dumps)?;
            written.push((key, dumps.len()));
        }
    }
    Ok(written)
}

fn cell_dirs(out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let cells = out.join("cells");
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&cells)
        .map_err(|e| PipelineError::RunDirectory {
            path: cells.clone(),
            message: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(OUTPUTS_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Re-extracts scores from the stored outputs of every cell in `out`.
/// Returns one ledger per cell.
pub fn reextract(out: &Path, model: &str) -> Result<Vec<ExclusionLedger>, PipelineError> {
    let mut ledgers = Vec::new();
    for dir in cell_dirs(out)? {
        let outputs: Vec<ModelOutput> = io::read_jsonl(&dir.join(OUTPUTS_FILE))?;
        let results: Vec<ExtractionResult> = crate::par::map(&outputs, extract_one);
        io::write_jsonl(&dir.join(EXTRACTIONS_FILE), &results)?;
        if let Some(ledger) = ledgers_for(&results, model).into_iter().next() {
            io::write_json_pretty(&dir.join(LEDGER_FILE), &ledger)?;
            ledgers.push(ledger);
        }
    }
    Ok(ledgers)
}

/// Recomputes reports from stored extraction results and gold scores,
/// optionally writing the `worst` largest deviations per cell.
pub fn rescore(
    manifest: &RunManifest,
    out: &Path,
    worst: Option<usize>,
) -> Result<Vec<CorrelationReport>, PipelineError> {
    let corpora = manifest.load_corpora()?;
    let gold: HashMap<&LangPair, &Corpus> = corpora.iter().map(|c| (&c.pair, c)).collect();
    let mut reports = Vec::new();
    for dir in cell_dirs(out)? {
        let results: Vec<ExtractionResult> = io::read_jsonl(&dir.join(EXTRACTIONS_FILE))?;
        let Some(first) = results.first() else { continue };
        let corpus = gold
            .get(&first.prompt_ref.pair)
            .ok_or_else(|| PipelineError::UnknownPair(first.prompt_ref.pair.clone()))?;
        let meta = RunMeta {
            pair: corpus.pair.clone(),
            template: first.prompt_ref.template,
            model: manifest.model().to_owned(),
        };
        match evaluate(&corpus.test, &results, &meta) {
            Ok(report) => {
                io::write_json_pretty(&dir.join(REPORT_FILE), &report)?;
                reports.push(report);
            }
            Err(e) => log::warn!("{}: {e}", dir.display()),
        }
        if let Some(k) = worst {
            let rows = worst::worst_deviations(&corpus.test, &results, k)?;
            io::write_jsonl(&dir.join(WORST_FILE), &rows)?;
        }
    }
    io::write_json_pretty(&out.join(REPORTS_FILE), &reports)?;
    Ok(reports)
}

pub fn load_reports(path: &Path) -> Result<Vec<CorrelationReport>, PipelineError> {
    let file = if path.is_dir() { path.join(REPORTS_FILE) } else { path.to_owned() };
    io::read_json(&file).map_err(|e| PipelineError::RunDirectory {
        path: file,
        message: e.to_string(),
    })
}
