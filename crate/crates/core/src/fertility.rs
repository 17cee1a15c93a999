//! Subword fertility: tokens per whitespace word under different tokenizer
//! definitions.
//!
//! Definitions are Hugging Face `tokenizer.json` files. Word counts are
//! Unicode-whitespace runs of `source + " " + translation`; special tokens
//! never count.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokenizers::models::bpe::{BpeTrainer, BPE};
use tokenizers::models::wordlevel::WordLevel;
use tokenizers::models::{ModelWrapper, TrainerWrapper};
use tokenizers::pre_tokenizers::whitespace::{Whitespace, WhitespaceSplit};
use tokenizers::{AddedToken, Tokenizer};

use crate::corpus::{Corpus, LangPair, Segment};
use crate::gateway::{estimate_tokens, TokenCounter};
use crate::metrics::compensated_sum;

pub const DEFAULT_SAMPLE_SIZE: usize = 100;

/// Probe text every definition must tokenize to at least one token.
const PROBE: &str = "hello";

#[derive(Debug, Error)]
pub enum FertilityError {
    #[error("tokenizer {name}: cannot load {path}: {message}")]
    Load { name: String, path: PathBuf, message: String },
    #[error("tokenizer {name}: declared {declared}, definition is {found}")]
    KindMismatch {
        name: String,
        declared: TokenizerKind,
        found: TokenizerKind,
    },
    #[error("tokenizer {name} produced no tokens for {PROBE:?}")]
    EmptyProbe { name: String },
    #[error("sample of {k} requested from a test split of {available}")]
    SampleTooLarge { k: usize, available: usize },
    #[error("no fertility records to summarize")]
    NoRecords,
    #[error("{path}:{line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error("training failed: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenizerKind {
    SentencePieceLike,
    BPELike,
    WordLevel,
}

impl TokenizerKind {
    fn of(model: &ModelWrapper) -> Self {
        match model {
            ModelWrapper::Unigram(_) => TokenizerKind::SentencePieceLike,
            ModelWrapper::BPE(_) | ModelWrapper::WordPiece(_) => TokenizerKind::BPELike,
            ModelWrapper::WordLevel(_) => TokenizerKind::WordLevel,
        }
    }
}

impl fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerKind::SentencePieceLike => "SentencePieceLike",
            TokenizerKind::BPELike => "BPELike",
            TokenizerKind::WordLevel => "WordLevel",
        })
    }
}

/// One line of a tokenizer manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub name: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<TokenizerKind>,
}

/// Reads a JSONL tokenizer manifest. Relative paths resolve against the
/// manifest's directory; blank lines and `#` comments are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<TokenizerSpec>, FertilityError> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut specs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut spec: TokenizerSpec = serde_json::from_str(line).map_err(|e| FertilityError::Manifest {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if spec.path.is_relative() {
            spec.path = base.join(&spec.path);
        }
        specs.push(spec);
    }
    Ok(specs)
}

/// A loaded tokenizer. Cloning shares the definition; encoding takes `&self`
/// so one handle serves all workers.
#[derive(Clone)]
pub struct TokenizerHandle {
    name: String,
    definition_path: PathBuf,
    kind: TokenizerKind,
    inner: Arc<Tokenizer>,
    /// Special added tokens by id.
    specials: Arc<HashMap<u32, String>>,
}

impl fmt::Debug for TokenizerHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenizerHandle")
            .field("name", &self.name)
            .field("definition_path", &self.definition_path)
            .field("kind", &self.kind)
            .finish_non_exhaustive()
    }
}

impl TokenizerHandle {
    /// Loads a definition file. When `declared` is given it must match the
    /// model type found in the file.
    pub fn load(name: &str, path: &Path, declared: Option<TokenizerKind>) -> Result<Self, FertilityError> {
        let inner = Tokenizer::from_file(path).map_err(|e| FertilityError::Load {
            name: name.to_owned(),
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        Self::from_tokenizer(name, path, inner, declared)
    }

    /// Parses a definition held in memory; `definition_path` is left empty.
    pub fn from_json(name: &str, json: &str, declared: Option<TokenizerKind>) -> Result<Self, FertilityError> {
        let inner = Tokenizer::from_str(json).map_err(|e| FertilityError::Load {
            name: name.to_owned(),
            path: PathBuf::new(),
            message: e.to_string(),
        })?;
        Self::from_tokenizer(name, Path::new(""), inner, declared)
    }

    pub fn from_spec(spec: &TokenizerSpec) -> Result<Self, FertilityError> {
        Self::load(&spec.name, &spec.path, spec.kind)
    }

    fn from_tokenizer(
        name: &str,
        path: &Path,
        inner: Tokenizer,
        declared: Option<TokenizerKind>,
    ) -> Result<Self, FertilityError> {
        let found = TokenizerKind::of(inner.get_model());
        if let Some(declared) = declared.filter(|d| *d != found) {
            return Err(FertilityError::KindMismatch {
                name: name.to_owned(),
                declared,
                found,
            });
        }
        let specials = inner
            .get_added_tokens_decoder()
            .into_iter()
            .filter(|(_, t)| t.special)
            .map(|(id, t)| (id, t.content))
            .collect();
        let handle = TokenizerHandle {
            name: name.to_owned(),
            definition_path: path.to_owned(),
            kind: found,
            inner: Arc::new(inner),
            specials: Arc::new(specials),
        };
        match handle.count(PROBE) {
            Ok(n) if n >= 1 => Ok(handle),
            _ => Err(FertilityError::EmptyProbe { name: name.to_owned() }),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn definition_path(&self) -> &Path {
        &self.definition_path
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    /// Number of non-special tokens in `text`. A special token counts only
    /// when the model emitted it for other text, as with an unknown token
    /// standing in for an unseen character.
    pub fn count(&self, text: &str) -> Result<usize, String> {
        let enc = self.inner.encode(text, false).map_err(|e| e.to_string())?;
        let literal_special = |i: usize| {
            let (start, end) = enc.get_offsets()[i];
            self.specials
                .get(&enc.get_ids()[i])
                .is_some_and(|content| text.get(start..end) == Some(content.as_str()))
        };
        Ok((0..enc.len())
            .filter(|&i| enc.get_special_tokens_mask()[i] == 0 && !literal_special(i))
            .count())
    }
}

impl TokenCounter for TokenizerHandle {
    fn count_tokens(&self, text: &str) -> usize {
        self.count(text).unwrap_or_else(|e| {
            log::warn!("tokenizer {} failed, estimating: {e}", self.name);
            estimate_tokens(text)
        })
    }
}

/// Trains a small whitespace/punctuation BPE definition and returns its JSON.
/// Intended for fixtures and quick baselines, not as a model tokenizer.
pub fn train_bpe<S: AsRef<str> + Sync>(texts: &[S], vocab_size: usize) -> Result<String, FertilityError> {
    let model = BPE::builder()
        .unk_token("[UNK]".into())
        .build()
        .map_err(|e| FertilityError::Training(e.to_string()))?;
    let mut tok = Tokenizer::new(model);
    tok.with_pre_tokenizer(Some(Whitespace {}));
    let mut trainer: TrainerWrapper = BpeTrainer::builder()
        .vocab_size(vocab_size)
        .show_progress(false)
        .special_tokens(vec![AddedToken::from("[UNK]", true)])
        .build()
        .into();
    tok.train(&mut trainer, texts.iter())
        .map_err(|e| FertilityError::Training(e.to_string()))?;
    tok.to_string(false).map_err(|e| FertilityError::Training(e.to_string()))
}

/// A WordLevel definition over the whitespace-separated words of `texts`,
/// with `[UNK]` for everything else. Every whitespace word maps to exactly
/// one token.
pub fn whitespace_word_level<S: AsRef<str>>(texts: &[S]) -> Result<String, FertilityError> {
    let mut vocab: HashMap<String, u32> = [("[UNK]".to_owned(), 0)].into();
    for word in texts.iter().flat_map(|t| t.as_ref().split_whitespace()) {
        let next = vocab.len() as u32;
        vocab.entry(word.to_owned()).or_insert(next);
    }
    let model = WordLevel::builder()
        .vocab(vocab.into_iter().collect())
        .unk_token("[UNK]".into())
        .build()
        .map_err(|e| FertilityError::Training(e.to_string()))?;
    let mut tok = Tokenizer::new(model);
    tok.with_pre_tokenizer(Some(WhitespaceSplit));
    tok.to_string(false).map_err(|e| FertilityError::Training(e.to_string()))
}

/// Number of maximal non-whitespace runs.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Seeded uniform sample of `k` distinct test segments, in sampled order.
pub fn sample_sentences(corpus: &Corpus, k: usize, seed: u64) -> Result<Vec<Segment>, FertilityError> {
    let available = corpus.test.len();
    if k > available {
        return Err(FertilityError::SampleTooLarge { k, available });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, available, k)
        .into_iter()
        .map(|i| corpus.test[i].clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    SourcePlusTranslation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FertilityRecord {
    pub pair: LangPair,
    pub sentence_id: u64,
    pub side: Side,
    pub word_count: usize,
    pub token_counts: BTreeMap<String, usize>,
    pub fertility: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerFailure {
    pub tokenizer: String,
    pub segment_id: u64,
    pub message: String,
}

/// Records plus the cells that could not be measured.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Measurement {
    pub records: Vec<FertilityRecord>,
    pub failures: Vec<TokenizerFailure>,
}

pub fn measured_text(seg: &Segment) -> String {
    format!("{} {}", seg.source, seg.translation)
}

/// One record per segment. A tokenizer that fails on a segment, or yields
/// no tokens, is left out of that record and reported in `failures`.
pub fn measure(segments: &[Segment], tokenizers: &[TokenizerHandle]) -> Measurement {
    let cells = crate::par::map(segments, |seg| {
        let text = measured_text(seg);
        let words = word_count(&text);
        let mut record = FertilityRecord {
            pair: seg.pair.clone(),
            sentence_id: seg.id,
            side: Side::SourcePlusTranslation,
            word_count: words,
            token_counts: BTreeMap::new(),
            fertility: BTreeMap::new(),
        };
        let mut failures = Vec::new();
        for tok in tokenizers {
            match tok.count(&text) {
                Ok(n) if n >= 1 => {
                    record.token_counts.insert(tok.name.clone(), n);
                    record.fertility.insert(tok.name.clone(), n as f64 / words as f64);
                }
                Ok(_) => failures.push(TokenizerFailure {
                    tokenizer: tok.name.clone(),
                    segment_id: seg.id,
                    message: "no tokens produced".into(),
                }),
                Err(message) => failures.push(TokenizerFailure {
                    tokenizer: tok.name.clone(),
                    segment_id: seg.id,
                    message,
                }),
            }
        }
        (record, failures)
    });
    let mut out = Measurement::default();
    for (record, failures) in cells {
        out.records.push(record);
        out.failures.extend(failures);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FertilitySummary {
    pub pair: LangPair,
    pub tokenizer: String,
    pub sentences: usize,
    pub mean_words: f64,
    pub mean_tokens: f64,
    pub mean_fertility: f64,
    pub median_fertility: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per (pair, tokenizer) means and medians, ordered by pair then tokenizer.
pub fn summarize(records: &[FertilityRecord]) -> Result<Vec<FertilitySummary>, FertilityError> {
    if records.is_empty() {
        return Err(FertilityError::NoRecords);
    }
    let mut groups: BTreeMap<(String, &str), Vec<&FertilityRecord>> = BTreeMap::new();
    for r in records {
        for name in r.token_counts.keys() {
            groups.entry((r.pair.to_string(), name.as_str())).or_default().push(r);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((_, name), rs)| {
            let n = rs.len() as f64;
            let mut fert: Vec<f64> = rs.iter().map(|r| r.fertility[name]).collect();
            FertilitySummary {
                pair: rs[0].pair.clone(),
                tokenizer: name.to_owned(),
                sentences: rs.len(),
                mean_words: compensated_sum(rs.iter().map(|r| r.word_count as f64)) / n,
                mean_tokens: compensated_sum(rs.iter().map(|r| r.token_counts[name] as f64)) / n,
                mean_fertility: compensated_sum(fert.iter().copied()) / n,
                median_fertility: median(&mut fert),
            }
        })
        .collect())
}

pub const SUMMARY_HEADER: &str = "pair\ttokenizer\tsentences\tmean_words\tmean_tokens\tmean_fertility\tmedian_fertility";

/// Tab-separated summary table, preceded by a `#` line stating how words
/// are counted.
pub fn write_summary_tsv<W: Write>(summaries: &[FertilitySummary], mut w: W) -> std::io::Result<()> {
    writeln!(w, "# words = Unicode-whitespace runs of source + \" \" + translation; special tokens excluded")?;
    writeln!(w, "{SUMMARY_HEADER}")?;
    for s in summaries {
        writeln!(
            w,
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            s.pair, s.tokenizer, s.sentences, s.mean_words, s.mean_tokens, s.mean_fertility, s.median_fertility
        )?;
    }
    Ok(())
}

/// Total counts per pair and series for bar charts: the `words` series
/// first, then one series per tokenizer.
pub fn write_plot_data<W: Write>(records: &[FertilityRecord], mut w: W) -> std::io::Result<()> {
    let mut totals: BTreeMap<String, (usize, BTreeMap<&str, usize>)> = BTreeMap::new();
    for r in records {
        let entry = totals.entry(r.pair.to_string()).or_default();
        entry.0 += r.word_count;
        for (name, &n) in &r.token_counts {
            *entry.1.entry(name.as_str()).or_default() += n;
        }
    }
    writeln!(w, "pair\tseries\tcount")?;
    for (pair, (words, by_tok)) in &totals {
        writeln!(w, "{pair}\twords\t{words}")?;
        for (name, n) in by_tok {
            writeln!(w, "{pair}\t{name}\t{n}")?;
        }
    }
    Ok(())
}
