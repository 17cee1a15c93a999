//! Instruction-tuning datasets built from training splits with the AG prompt.
//!
//! UMT pools every pair into one shuffled file; ILT writes one file per
//! pair. Each export also writes `sft_manifest.jsonl` with one line per
//! dataset file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{Corpus, LangPair, Segment};
use crate::io;
use crate::prompts::{format_score, render_zero_shot, PromptError, PromptTemplate, TemplateId};

pub const MANIFEST_FILE: &str = "sft_manifest.jsonl";

#[derive(Debug, Error)]
pub enum SftError {
    #[error("no training segments for {}", .0.as_ref().map_or("any pair".to_owned(), |p| p.to_string()))]
    EmptyTrainSplit(Option<LangPair>),
    #[error("pair {0} is not among the corpora")]
    PairNotFound(LangPair),
    #[error("SFT instructions need the AG template, got {0}")]
    WrongTemplate(TemplateId),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMeta {
    pub pair: LangPair,
    pub segment_id: u64,
    pub template_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub instruction: String,
    pub output: String,
    pub meta: SftMeta,
}

impl SftRecord {
    pub fn from_segment(template: &PromptTemplate, segment: &Segment) -> Result<Self, SftError> {
        if template.id != TemplateId::Ag {
            return Err(SftError::WrongTemplate(template.id));
        }
        let prompt = render_zero_shot(template, segment, 0)?;
        Ok(SftRecord {
            instruction: prompt.text,
            output: target_text(segment.da_mean),
            meta: SftMeta {
                pair: segment.pair.clone(),
                segment_id: segment.id,
                template_version: template.version.clone(),
            },
        })
    }

    /// Alpaca-style `{instruction, input, output}` object.
    pub fn to_alpaca(&self) -> Value {
        json!({ "instruction": self.instruction, "input": "", "output": self.output })
    }
}

/// The training target for a gold score, e.g. `Score: 73.0`.
pub fn target_text(da_mean: f64) -> String {
    format!("Score: {}", format_score(da_mean))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "pair")]
pub enum SftMode {
    /// All pairs pooled into one file.
    #[serde(rename = "umt")]
    Umt,
    /// One file per pair, or only the named pair.
    #[serde(rename = "ilt")]
    Ilt(Option<LangPair>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SftFormat {
    /// `{instruction, output, meta}` records.
    #[default]
    Neutral,
    Alpaca,
}

/// Fine-tuning settings carried into the manifest. Nothing here is executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperparameterMemo {
    pub lora_rank: u32,
    pub quantization: String,
    pub precision: String,
}

impl Default for HyperparameterMemo {
    fn default() -> Self {
        HyperparameterMemo {
            lora_rank: 64,
            quantization: "4-bit".into(),
            precision: "fp16".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftConfig {
    pub mode: SftMode,
    pub shuffle_seed: u64,
    #[serde(default)]
    pub format: SftFormat,
    #[serde(default)]
    pub hyperparameter_memo: HyperparameterMemo,
}

impl SftConfig {
    pub fn new(mode: SftMode, shuffle_seed: u64) -> Self {
        SftConfig {
            mode,
            shuffle_seed,
            format: SftFormat::default(),
            hyperparameter_memo: HyperparameterMemo::default(),
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftManifestEntry {
    pub file: String,
    pub mode: String,
    pub format: SftFormat,
    pub records: usize,
    pub counts: BTreeMap<String, usize>,
    pub shuffle_seed: u64,
    pub template_version: String,
    pub hyperparameter_memo: HyperparameterMemo,
}

fn records_for(template: &PromptTemplate, corpus: &Corpus) -> Result<Vec<SftRecord>, SftError> {
    if corpus.train.is_empty() {
        return Err(SftError::EmptyTrainSplit(Some(corpus.pair.clone())));
    }
    corpus.train.iter().map(|s| SftRecord::from_segment(template, s)).collect()
}

fn shuffled(mut records: Vec<SftRecord>, seed: u64) -> Vec<SftRecord> {
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    records
}

/// Builds the datasets in memory: `(file name, records)` per output file.
pub fn build(
    corpora: &[Corpus],
    template: &PromptTemplate,
    config: &SftConfig,
) -> Result<Vec<(String, Vec<SftRecord>)>, SftError> {
    match &config.mode {
        SftMode::Umt => {
            if corpora.is_empty() {
                return Err(SftError::EmptyTrainSplit(None));
            }
            let mut all = Vec::new();
            for c in corpora {
                all.extend(records_for(template, c)?);
            }
            Ok(vec![("umt.jsonl".to_owned(), shuffled(all, config.shuffle_seed))])
        }
        SftMode::Ilt(only) => {
            let selected: Vec<&Corpus> = match only {
                Some(pair) => vec![corpora
                    .iter()
                    .find(|c| &c.pair == pair)
                    .ok_or_else(|| SftError::PairNotFound(pair.clone()))?],
                None if corpora.is_empty() => return Err(SftError::EmptyTrainSplit(None)),
                None => corpora.iter().collect(),
            };
            selected
                .into_iter()
                .map(|c| {
                    let records = records_for(template, c)?;
                    Ok((format!("ilt-{}.jsonl", c.pair), shuffled(records, config.shuffle_seed)))
                })
                .collect()
        }
    }
}

fn encode(records: &[SftRecord], format: SftFormat) -> std::io::Result<Vec<u8>> {
    match format {
        SftFormat::Neutral => io::to_jsonl(records),
        SftFormat::Alpaca => io::to_jsonl(&records.iter().map(SftRecord::to_alpaca).collect::<Vec<_>>()),
    }
}

/// Writes the dataset files and the manifest into `out_dir`, each
/// atomically. Returns the manifest entries.
pub fn export(
    corpora: &[Corpus],
    template: &PromptTemplate,
    config: &SftConfig,
    out_dir: &Path,
) -> Result<Vec<SftManifestEntry>, SftError> {
    let datasets = build(corpora, template, config)?;
    std::fs::create_dir_all(out_dir)?;
    let mode = match config.mode {
        SftMode::Umt => "umt",
        SftMode::Ilt(_) => "ilt",
    };
    let mut manifest = Vec::with_capacity(datasets.len());
    for (file, records) in &datasets {
        io::write_atomic(&out_dir.join(file), &encode(records, config.format)?)?;
        let mut counts = BTreeMap::new();
        for r in records {
            *counts.entry(r.meta.pair.to_string()).or_insert(0) += 1;
        }
        manifest.push(SftManifestEntry {
            file: file.clone(),
            mode: mode.to_owned(),
            format: config.format,
            records: records.len(),
            counts,
            shuffle_seed: config.shuffle_seed,
            template_version: template.version.clone(),
            hyperparameter_memo: config.hyperparameter_memo.clone(),
        });
    }
    io::write_atomic(&out_dir.join(MANIFEST_FILE), &io::to_jsonl(&manifest)?)?;
    Ok(manifest)
}

/// Rewrites a neutral dataset file into another record shape.
pub fn convert_file<F>(input: &Path, output: &Path, convert: F) -> Result<usize, SftError>
where
    F: Fn(&SftRecord) -> Value,
{
    let records: Vec<SftRecord> = io::read_jsonl(input)?;
    let converted: Vec<Value> = records.iter().map(convert).collect();
    io::write_atomic(output, &io::to_jsonl(&converted)?)?;
    Ok(converted.len())
}

pub fn dataset_paths(out_dir: &Path, manifest: &[SftManifestEntry]) -> Vec<PathBuf> {
    manifest.iter().map(|m| out_dir.join(&m.file)).collect()
}
