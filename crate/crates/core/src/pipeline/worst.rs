//! Largest prediction errors, exported for manual error labelling.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{LangPair, Segment};
use crate::extraction::ExtractionResult;
use crate::metrics::MetricsError;
use crate::prompts::TemplateId;

/// Annotation schema for translation errors behind large deviations.
/// Rows are exported unlabelled; annotators fill in `error_label`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorLabel {
    IncorrectTerm,
    UseOfEntity,
    SyntacticError,
    LongText,
    MissingInformation,
    IncompleteSentence,
    UseOfAbbreviation,
    Transliteration,
}

impl ErrorLabel {
    pub const ALL: [ErrorLabel; 8] = [
        ErrorLabel::IncorrectTerm,
        ErrorLabel::UseOfEntity,
        ErrorLabel::SyntacticError,
        ErrorLabel::LongText,
        ErrorLabel::MissingInformation,
        ErrorLabel::IncompleteSentence,
        ErrorLabel::UseOfAbbreviation,
        ErrorLabel::Transliteration,
    ];
}

impl fmt::Display for ErrorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorLabel::IncorrectTerm => "Incorrect term",
            ErrorLabel::UseOfEntity => "Use of Entity",
            ErrorLabel::SyntacticError => "Syntactic error",
            ErrorLabel::LongText => "Long-text",
            ErrorLabel::MissingInformation => "Missing information",
            ErrorLabel::IncompleteSentence => "Incomplete sentence",
            ErrorLabel::UseOfAbbreviation => "Use of abbreviation",
            ErrorLabel::Transliteration => "Transliteration",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstRow {
    pub pair: LangPair,
    pub segment_id: u64,
    pub template: TemplateId,
    pub source: String,
    pub translation: String,
    pub gold: f64,
    pub pred: f64,
    /// pred − gold
    pub deviation: f64,
    pub error_label: Option<ErrorLabel>,
}

/// The `k` scored rows with the largest |pred − gold|, largest first; ties
/// keep ascending segment id. Excluded rows are skipped.
pub fn worst_deviations(
    gold_segments: &[Segment],
    results: &[ExtractionResult],
    k: usize,
) -> Result<Vec<WorstRow>, MetricsError> {
    let by_id: HashMap<(&LangPair, u64), &Segment> = gold_segments.iter().map(|s| ((&s.pair, s.id), s)).collect();
    let mut rows = Vec::new();
    for r in results {
        let seg = by_id
            .get(&(&r.prompt_ref.pair, r.prompt_ref.segment_id))
            .ok_or(MetricsError::UnknownSegment(r.prompt_ref.segment_id))?;
        let Some(pred) = r.outcome.score() else { continue };
        rows.push(WorstRow {
            pair: seg.pair.clone(),
            segment_id: seg.id,
            template: r.prompt_ref.template,
            source: seg.source.clone(),
            translation: seg.translation.clone(),
            gold: seg.da_mean,
            pred,
            deviation: pred - seg.da_mean,
            error_label: None,
        });
    }
    rows.sort_by(|a, b| {
        b.deviation
            .abs()
            .total_cmp(&a.deviation.abs())
            .then(a.segment_id.cmp(&b.segment_id))
    });
    rows.truncate(k);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::extraction::{ExclusionReason, Outcome};
    use crate::gateway::PromptRef;

    #[test]
    fn picks_largest_absolute_deviations() {
        let pair: LangPair = "en-si".parse().unwrap();
        let gold: Vec<Segment> = [50.0, 60.0, 70.0, 80.0]
            .iter()
            .enumerate()
            .map(|(i, &g)| Segment::new(i as u64, "s", "t", g, pair.clone(), Split::Test).unwrap())
            .collect();
        let preds = [Some(55.0), Some(40.0), None, Some(60.0)];
        let results: Vec<ExtractionResult> = preds
            .iter()
            .enumerate()
            .map(|(i, p)| ExtractionResult {
                prompt_ref: PromptRef {
                    pair: pair.clone(),
                    segment_id: i as u64,
                    template: TemplateId::Ag,
                    seed: 0,
                },
                outcome: match p {
                    Some(score) => Outcome::Score { score: *score },
                    None => Outcome::excluded(ExclusionReason::NoNumericMatch),
                },
                matched_span: None,
            })
            .collect();
        let rows = worst_deviations(&gold, &results, 2).unwrap();
        let ids: Vec<u64> = rows.iter().map(|r| r.segment_id).collect();
        // |dev| = 5, 20, excluded, 20: the tie keeps id order.
        assert_eq!(ids, [1, 3]);
        assert_eq!(rows[0].deviation, -20.0);
        assert_eq!(worst_deviations(&gold, &results, 10).unwrap().len(), 3);
    }

    #[test]
    fn label_schema() {
        assert_eq!(ErrorLabel::ALL.len(), 8);
        assert_eq!(serde_json::to_string(&ErrorLabel::UseOfEntity).unwrap(), "\"use-of-entity\"");
        assert_eq!(ErrorLabel::LongText.to_string(), "Long-text");
    }
}
