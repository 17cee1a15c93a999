//! DA-annotated QE corpora: loading, validation, splits and score bins.
//!
//! Input files are tab-separated UTF-8 with a header row. Columns are looked
//! up by name through a [`ColumnMap`]; the defaults match the WMT DA releases
//! (`index`, `original`, `translation`, `mean`). Extra columns such as
//! `z_mean` are ignored.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: {reason}")]
    RowParseError { row: usize, reason: RowError },
    #[error("score {0} outside [0, 100]")]
    ScoreOutOfRange(f64),
    #[error("invalid language pair `{0}`")]
    InvalidLangPair(String),
    #[error("invalid segment: {0}")]
    InvalidSegment(String),
    #[error("text of segment {0} contains a tab or line break and cannot be written as TSV")]
    Unrepresentable(u64),
    #[error("corpus manifest {path} line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Why a single data row was rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowError {
    #[error("score {value} out of range")]
    OutOfRange { value: f64 },
    #[error("score `{text}` is not a decimal number")]
    BadNumber { text: String },
    #[error("empty {field}")]
    EmptyText { field: String },
    #[error("missing field `{field}`")]
    MissingField { field: String },
    #[error("id `{text}` is not an unsigned integer")]
    BadId { text: String },
    #[error("duplicate id {id}")]
    DuplicateId { id: u64 },
}

// ---------------------------------------------------------------------------
// Language pairs

/// Source/target language codes, displayed as `src-tgt`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LangPair {
    source: String,
    target: String,
}

fn valid_code(code: &str) -> bool {
    (2..=3).contains(&code.len()) && code.bytes().all(|b| b.is_ascii_lowercase())
}

impl LangPair {
    pub fn new(source: &str, target: &str) -> Result<Self, CorpusError> {
        if !valid_code(source) || !valid_code(target) {
            return Err(CorpusError::InvalidLangPair(format!("{source}-{target}")));
        }
        Ok(LangPair {
            source: source.to_owned(),
            target: target.to_owned(),
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn target(&self) -> &str {
        &self.target
    }
}

impl fmt::Display for LangPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.source, self.target)
    }
}

impl FromStr for LangPair {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (src, tgt) = s
            .split_once('-')
            .ok_or_else(|| CorpusError::InvalidLangPair(s.to_owned()))?;
        LangPair::new(src, tgt)
    }
}

impl TryFrom<String> for LangPair {
    type Error = CorpusError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<LangPair> for String {
    fn from(p: LangPair) -> String {
        p.to_string()
    }
}

// ---------------------------------------------------------------------------
// Segments

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One QE instance: a source sentence, its machine translation and the mean
/// human DA score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u64,
    pub source: String,
    pub translation: String,
    pub da_mean: f64,
    pub pair: LangPair,
    pub split: Split,
}

impl Segment {
    /// Builds a segment, enforcing the score range and non-empty texts.
    pub fn new(
        id: u64,
        source: impl Into<String>,
        translation: impl Into<String>,
        da_mean: f64,
        pair: LangPair,
        split: Split,
    ) -> Result<Self, CorpusError> {
        let source = source.into();
        let translation = translation.into();
        if !(0.0..=100.0).contains(&da_mean) {
            return Err(CorpusError::ScoreOutOfRange(da_mean));
        }
        if source.trim().is_empty() {
            return Err(CorpusError::InvalidSegment(format!("segment {id}: empty source")));
        }
        if translation.trim().is_empty() {
            return Err(CorpusError::InvalidSegment(format!(
                "segment {id}: empty translation"
            )));
        }
        Ok(Segment {
            id,
            source,
            translation,
            da_mean,
            pair,
            split,
        })
    }
}

/// Train and test splits for one language pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub pair: LangPair,
    pub train: Vec<Segment>,
    pub test: Vec<Segment>,
}

impl Corpus {
    pub fn new(pair: LangPair) -> Self {
        Corpus {
            pair,
            train: Vec::new(),
            test: Vec::new(),
        }
    }

    pub fn split(&self, split: Split) -> &[Segment] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

// ---------------------------------------------------------------------------
// Score bins

/// The five DA score ranges used both for exemplar selection and for the AG
/// guideline clauses. Upper bounds are closed: [0,30], (30,50], (50,70],
/// (70,90], (90,100].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScoreBin {
    #[serde(rename = "0-30")]
    B0_30,
    #[serde(rename = "31-50")]
    B31_50,
    #[serde(rename = "51-70")]
    B51_70,
    #[serde(rename = "71-90")]
    B71_90,
    #[serde(rename = "91-100")]
    B91_100,
}

impl ScoreBin {
    pub const ALL: [ScoreBin; 5] = [
        ScoreBin::B0_30,
        ScoreBin::B31_50,
        ScoreBin::B51_70,
        ScoreBin::B71_90,
        ScoreBin::B91_100,
    ];

    /// Inclusive-upper bounds `(lo, hi)`; only the first bin includes `lo`.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ScoreBin::B0_30 => (0.0, 30.0),
            ScoreBin::B31_50 => (30.0, 50.0),
            ScoreBin::B51_70 => (50.0, 70.0),
            ScoreBin::B71_90 => (70.0, 90.0),
            ScoreBin::B91_100 => (90.0, 100.0),
        }
    }

    /// Range label as written in prompts, e.g. `31-50`.
    pub fn label(self) -> &'static str {
        match self {
            ScoreBin::B0_30 => "0-30",
            ScoreBin::B31_50 => "31-50",
            ScoreBin::B51_70 => "51-70",
            ScoreBin::B71_90 => "71-90",
            ScoreBin::B91_100 => "91-100",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn contains(self, score: f64) -> bool {
        let (lo, hi) = self.bounds();
        if self == ScoreBin::B0_30 {
            (lo..=hi).contains(&score)
        } else {
            score > lo && score <= hi
        }
    }
}

impl fmt::Display for ScoreBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn bin_of(score: f64) -> Result<ScoreBin, CorpusError> {
    if !(0.0..=100.0).contains(&score) {
        return Err(CorpusError::ScoreOutOfRange(score));
    }
    Ok(if score <= 30.0 {
        ScoreBin::B0_30
    } else if score <= 50.0 {
        ScoreBin::B31_50
    } else if score <= 70.0 {
        ScoreBin::B51_70
    } else if score <= 90.0 {
        ScoreBin::B71_90
    } else {
        ScoreBin::B91_100
    })
}

/// Per-bin counts; every bin is present, absent ones with 0.
pub fn histogram(segments: &[Segment]) -> BTreeMap<ScoreBin, usize> {
    let mut counts: BTreeMap<ScoreBin, usize> = ScoreBin::ALL.iter().map(|&b| (b, 0)).collect();
    for s in segments {
        // Segment construction guarantees the range.
        if let Ok(bin) = bin_of(s.da_mean) {
            *counts.entry(bin).or_default() += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// Loading

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub source: String,
    pub translation: String,
    pub score: String,
    /// Optional id column; row position is used when the header lacks it.
    pub id: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            source: "original".into(),
            translation: "translation".into(),
            score: "mean".into(),
            id: "index".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadMode {
    /// Collect row errors as diagnostics and keep going.
    #[default]
    Lenient,
    /// Abort on the first row error.
    Strict,
}

/// A rejected row. `row` is the 1-based data row (the header is not counted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub row: usize,
    pub reason: RowError,
}

#[derive(Debug, Clone, Default)]
pub struct Loaded {
    pub segments: Vec<Segment>,
    pub diagnostics: Vec<Diagnostic>,
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

/// Loads one split from a TSV file. Segment ids come from the id column when
/// present, otherwise from the 0-based data row index.
pub fn load_corpus(
    path: &Path,
    pair: &LangPair,
    split: Split,
    columns: &ColumnMap,
    mode: LoadMode,
) -> Result<Loaded, CorpusError> {
    let unreadable = |source: std::io::Error| CorpusError::FileUnreadable {
        path: path.to_owned(),
        source,
    };
    let file = std::fs::File::open(path).map_err(unreadable)?;
    read_tsv(file, pair, split, columns, mode).map_err(|e| match e {
        CorpusError::FileUnreadable { source, .. } => unreadable(source),
        other => other,
    })
}

/// Reader-based variant of [`load_corpus`].
pub fn read_tsv<R: std::io::Read>(
    reader: R,
    pair: &LangPair,
    split: Split,
    columns: &ColumnMap,
    mode: LoadMode,
) -> Result<Loaded, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .has_headers(true)
        .from_reader(reader);
    let io_err = |e: csv::Error| CorpusError::FileUnreadable {
        path: PathBuf::new(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
    };
    let headers = rdr.headers().map_err(io_err)?.clone();
    let src_col = column_index(&headers, &columns.source)
        .ok_or_else(|| CorpusError::MissingColumn(columns.source.clone()))?;
    let mt_col = column_index(&headers, &columns.translation)
        .ok_or_else(|| CorpusError::MissingColumn(columns.translation.clone()))?;
    let score_col = column_index(&headers, &columns.score)
        .ok_or_else(|| CorpusError::MissingColumn(columns.score.clone()))?;
    let id_col = column_index(&headers, &columns.id);

    let mut out = Loaded::default();
    let mut seen = HashSet::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(io_err)?;
        let row = i + 1;
        match parse_row(&record, i, src_col, mt_col, score_col, id_col, columns) {
            Ok((id, src, mt, score)) if seen.insert(id) => {
                let seg = Segment {
                    id,
                    source: src.to_owned(),
                    translation: mt.to_owned(),
                    da_mean: score,
                    pair: pair.clone(),
                    split,
                };
                out.segments.push(seg);
            }
            Ok((id, ..)) => {
                let reason = RowError::DuplicateId { id };
                if mode == LoadMode::Strict {
                    return Err(CorpusError::RowParseError { row, reason });
                }
                out.diagnostics.push(Diagnostic { row, reason });
            }
            Err(reason) => {
                if mode == LoadMode::Strict {
                    return Err(CorpusError::RowParseError { row, reason });
                }
                out.diagnostics.push(Diagnostic { row, reason });
            }
        }
    }
    Ok(out)
}

fn parse_row<'r>(
    record: &'r csv::StringRecord,
    index: usize,
    src_col: usize,
    mt_col: usize,
    score_col: usize,
    id_col: Option<usize>,
    columns: &ColumnMap,
) -> Result<(u64, &'r str, &'r str, f64), RowError> {
    let field = |col: usize, name: &str| {
        record.get(col).ok_or_else(|| RowError::MissingField {
            field: name.to_owned(),
        })
    };
    let src = field(src_col, &columns.source)?;
    let mt = field(mt_col, &columns.translation)?;
    let raw_score = field(score_col, &columns.score)?.trim();
    if src.trim().is_empty() {
        return Err(RowError::EmptyText {
            field: columns.source.clone(),
        });
    }
    if mt.trim().is_empty() {
        return Err(RowError::EmptyText {
            field: columns.translation.clone(),
        });
    }
    let score: f64 = raw_score.parse().map_err(|_| RowError::BadNumber {
        text: raw_score.to_owned(),
    })?;
    if !score.is_finite() {
        return Err(RowError::BadNumber {
            text: raw_score.to_owned(),
        });
    }
    if !(0.0..=100.0).contains(&score) {
        return Err(RowError::OutOfRange { value: score });
    }
    let id = match id_col {
        Some(col) => {
            let text = field(col, &columns.id)?.trim();
            text.parse().map_err(|_| RowError::BadId {
                text: text.to_owned(),
            })?
        }
        None => index as u64,
    };
    Ok((id, src, mt, score))
}

/// Writes segments in the canonical layout: `index`, `original`,
/// `translation`, `mean`. Scores use the shortest round-trip decimal form.
pub fn write_tsv<W: Write>(segments: &[Segment], mut w: W) -> Result<(), CorpusError> {
    let io = |source| CorpusError::FileUnreadable {
        path: PathBuf::new(),
        source,
    };
    writeln!(w, "index\toriginal\ttranslation\tmean").map_err(io)?;
    for s in segments {
        let bad = |t: &str| t.contains(['\t', '\n', '\r']);
        if bad(&s.source) || bad(&s.translation) {
            return Err(CorpusError::Unrepresentable(s.id));
        }
        writeln!(w, "{}\t{}\t{}\t{}", s.id, s.source, s.translation, s.da_mean).map_err(io)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest

/// One line of a corpus manifest (JSON lines). Relative paths resolve
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub pair: LangPair,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub columns: ColumnMap,
}

#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub base_dir: PathBuf,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::FileUnreadable {
            path: path.to_owned(),
            source,
        })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let entry: CorpusEntry =
                serde_json::from_str(line).map_err(|e| CorpusError::Manifest {
                    path: path.to_owned(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            entries.push(entry);
        }
        Ok(CorpusManifest {
            base_dir: path.parent().map(Path::to_owned).unwrap_or_default(),
            entries,
        })
    }

    pub fn entry(&self, pair: &LangPair) -> Option<&CorpusEntry> {
        self.entries.iter().find(|e| &e.pair == pair)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads both splits of one entry. Diagnostics are returned per split.
    pub fn load_entry(
        &self,
        entry: &CorpusEntry,
        mode: LoadMode,
    ) -> Result<(Corpus, Vec<(Split, Diagnostic)>), CorpusError> {
        let mut corpus = Corpus::new(entry.pair.clone());
        let mut diags = Vec::new();
        for (split, path) in [(Split::Train, &entry.train), (Split::Test, &entry.test)] {
            let Some(path) = path else { continue };
            let loaded = load_corpus(&self.resolve(path), &entry.pair, split, &entry.columns, mode)?;
            diags.extend(loaded.diagnostics.into_iter().map(|d| (split, d)));
            match split {
                Split::Train => corpus.train = loaded.segments,
                Split::Test => corpus.test = loaded.segments,
            }
        }
        Ok((corpus, diags))
    }

    pub fn load_all(&self, mode: LoadMode) -> Result<Vec<Corpus>, CorpusError> {
        self.entries
            .iter()
            .map(|e| self.load_entry(e, mode).map(|(c, _)| c))
            .collect()
    }
}

/// Published train/test sizes of the eight low-resource pairs.
pub const KNOWN_SPLIT_SIZES: [(&str, usize, usize); 8] = [
    ("en-gu", 7000, 1000),
    ("en-hi", 7000, 1000),
    ("en-mr", 26_000, 699),
    ("en-ta", 7000, 1000),
    ("en-te", 7000, 1000),
    ("et-en", 7000, 1000),
    ("ne-en", 7000, 1000),
    ("si-en", 7000, 1000),
];

/// Advisory mismatches against [`KNOWN_SPLIT_SIZES`]; never an error since
/// later dataset revisions may differ.
pub fn size_warnings(corpus: &Corpus) -> Vec<String> {
    let key = corpus.pair.to_string();
    let Some(&(_, train, test)) = KNOWN_SPLIT_SIZES.iter().find(|(p, _, _)| *p == key) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    if !corpus.train.is_empty() && corpus.train.len() != train {
        out.push(format!(
            "{key}: train split has {} segments, published size is {train}",
            corpus.train.len()
        ));
    }
    if !corpus.test.is_empty() && corpus.test.len() != test {
        out.push(format!(
            "{key}: test split has {} segments, published size is {test}",
            corpus.test.len()
        ));
    }
    out
}
