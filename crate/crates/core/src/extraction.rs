//! DA score extraction from free-form model output.
//!
//! A numeral is a maximal run `[0-9]+(\.[0-9]+)?` whose integer part has 1–3
//! digits and whose fractional part has at most 2; longer runs, dotted
//! sequences like `1.2.3` and thousands-grouped numbers like `1,234` are not
//! numerals. A `-` or `−` directly before a numeral negates it unless the sign
//! follows a letter or digit (`0-100`, `GPT-4`).
//!
//! Candidate selection, in order:
//! 1. the first numeral that follows one of the labels `score`, `rating`,
//!    `quality` or `DA` (case-insensitive) by at most 12 characters;
//! 2. otherwise the first numeral in [0, 100];
//! 3. otherwise `Ambiguous` if the only in-range numerals are scale mentions,
//!    `OutOfRange` if there were numerals at all, `NoNumericMatch` if not.
//!
//! Scale mentions (`out of 100`, `/100`, `to 100`, the ends of a `0-100`
//! range, and the start of `0 to 100` / `0-100`) never count as candidates.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::LangPair;
use crate::gateway::{ModelOutput, PromptRef};
use crate::prompts::TemplateId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    NoNumericMatch,
    OutOfRange,
    TransportFailed,
    Ambiguous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Score { score: f64 },
    Excluded { reason: ExclusionReason },
}

impl Outcome {
    pub fn score(&self) -> Option<f64> {
        match self {
            Outcome::Score { score } => Some(*score),
            Outcome::Excluded { .. } => None,
        }
    }

    pub fn excluded(reason: ExclusionReason) -> Self {
        Outcome::Excluded { reason }
    }
}

/// Byte offset and length of the numeral a score came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub prompt_ref: PromptRef,
    #[serde(flatten)]
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_span: Option<Span>,
}

static NUMBER_RUN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[0-9]+(?:\.[0-9]+)?").expect("valid regex"));
static LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(?:score|rating|quality)|\bda\b").expect("valid regex"));
static SCALE_BEFORE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)(?:\bout\s+of|/|[0-9]\s*to|[0-9]\s*[-–])\s*$").expect("valid regex"));
static RANGE_AFTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^(?:\s*[-–]\s*|\s+to\s+)[0-9]").expect("valid regex"));

/// Maximum number of characters between a label and its numeral.
const LABEL_WINDOW: usize = 12;

#[derive(Debug, Clone, Copy)]
struct Numeral {
    /// Start of the sign if negative, else of the digits.
    start: usize,
    end: usize,
    value: f64,
    scale: bool,
}

fn prev_char(text: &str, at: usize) -> Option<char> {
    text[..at].chars().next_back()
}

fn digit_before(text: &str, at: usize) -> bool {
    prev_char(text, at).is_some_and(|c| c.is_ascii_digit())
}

fn numerals(text: &str) -> Vec<Numeral> {
    let mut out = Vec::new();
    for m in NUMBER_RUN.find_iter(text) {
        let digits = m.as_str();
        let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
        if int.len() > 3 || frac.len() > 2 {
            continue;
        }
        let before = prev_char(text, m.start());
        let after = &text[m.end()..];
        let continues_with_digit = |rest: &str| rest.starts_with(|c: char| c.is_ascii_digit());
        // Dotted sequences such as versions or dates.
        if before == Some('.') && digit_before(text, m.start() - 1) {
            continue;
        }
        if after.strip_prefix('.').is_some_and(continues_with_digit) {
            continue;
        }
        // Thousands groups.
        if before == Some(',') && digit_before(text, m.start() - 1) {
            continue;
        }
        if let Some(rest) = after.strip_prefix(',') {
            let group = rest.chars().take_while(char::is_ascii_digit).count();
            if group == 3 {
                continue;
            }
        }

        let mut value: f64 = digits.parse().expect("regex guarantees a decimal");
        let mut start = m.start();
        if let Some(sign @ ('-' | '−')) = before {
            let sign_at = m.start() - sign.len_utf8();
            let glued = prev_char(text, sign_at).is_some_and(char::is_alphanumeric);
            if !glued {
                value = -value;
                start = sign_at;
            }
        }

        let head = &text[..m.start()];
        let scale = SCALE_BEFORE.is_match(head) || RANGE_AFTER.is_match(after);
        out.push(Numeral {
            start,
            end: m.end(),
            value,
            scale,
        });
    }
    out
}

fn is_labeled(text: &str, numeral: &Numeral) -> bool {
    let head = &text[..numeral.start];
    LABEL
        .find_iter(head)
        .any(|m| head[m.end()..].chars().count() <= LABEL_WINDOW)
}

fn in_range(v: f64) -> bool {
    (0.0..=100.0).contains(&v)
}

/// Extracts a DA score; total over all inputs.
pub fn extract_score(raw_text: &str) -> (Outcome, Option<Span>) {
    let nums = numerals(raw_text);
    if nums.is_empty() {
        return (Outcome::excluded(ExclusionReason::NoNumericMatch), None);
    }
    let span = |n: &Numeral| Some(Span {
        offset: n.start,
        len: n.end - n.start,
    });
    if let Some(n) = nums.iter().find(|n| !n.scale && is_labeled(raw_text, n)) {
        return if in_range(n.value) {
            (Outcome::Score { score: n.value }, span(n))
        } else {
            (Outcome::excluded(ExclusionReason::OutOfRange), span(n))
        };
    }
    if let Some(n) = nums.iter().find(|n| !n.scale && in_range(n.value)) {
        return (Outcome::Score { score: n.value }, span(n));
    }
    if nums.iter().any(|n| n.scale && in_range(n.value)) {
        return (Outcome::excluded(ExclusionReason::Ambiguous), None);
    }
    (Outcome::excluded(ExclusionReason::OutOfRange), None)
}

/// Per (pair, template, model) exclusion accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionLedger {
    pub pair: LangPair,
    pub template: TemplateId,
    pub model: String,
    pub total: usize,
    pub excluded_count: usize,
    pub reasons: BTreeMap<ExclusionReason, usize>,
    pub flagged_untrustworthy: bool,
}

impl ExclusionLedger {
    pub fn new(pair: LangPair, template: TemplateId, model: impl Into<String>) -> Self {
        ExclusionLedger {
            pair,
            template,
            model: model.into(),
            total: 0,
            excluded_count: 0,
            reasons: BTreeMap::new(),
            flagged_untrustworthy: false,
        }
    }

    pub fn record(&mut self, outcome: &Outcome) {
        self.total += 1;
        if let Outcome::Excluded { reason } = outcome {
            self.excluded_count += 1;
            *self.reasons.entry(*reason).or_default() += 1;
        }
        self.flagged_untrustworthy = is_untrustworthy(self.excluded_count, self.total);
    }
}

/// More than 10 % of the inferences dropped.
pub fn is_untrustworthy(excluded: usize, total: usize) -> bool {
    excluded * 10 > total
}

pub fn extract_one(output: &ModelOutput) -> ExtractionResult {
    let (outcome, matched_span) = if output.status.is_ok() {
        extract_score(&output.raw_text)
    } else {
        (Outcome::excluded(ExclusionReason::TransportFailed), None)
    };
    ExtractionResult {
        prompt_ref: output.prompt_ref.clone(),
        outcome,
        matched_span,
    }
}

/// Extracts every output and builds one ledger per (pair, template) seen,
/// in sorted key order.
pub fn extract_batch(outputs: &[ModelOutput], model: &str) -> (Vec<ExtractionResult>, Vec<ExclusionLedger>) {
    let results = crate::par::map(outputs, extract_one);
    let ledgers = ledgers_for(&results, model);
    (results, ledgers)
}

pub fn ledgers_for(results: &[ExtractionResult], model: &str) -> Vec<ExclusionLedger> {
    let mut ledgers: BTreeMap<(LangPair, TemplateId), ExclusionLedger> = BTreeMap::new();
    for r in results {
        let key = (r.prompt_ref.pair.clone(), r.prompt_ref.template);
        ledgers
            .entry(key)
            .or_insert_with(|| ExclusionLedger::new(r.prompt_ref.pair.clone(), r.prompt_ref.template, model))
            .record(&r.outcome);
    }
    ledgers.into_values().collect()
}
