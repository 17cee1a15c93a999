//! Correlation and significance statistics between gold DA means and
//! extracted predictions.
//!
//! Moment sums use Neumaier-compensated summation. Kendall's tau is the
//! tau-b variant, computed in O(n log n) by sorting and counting merge-sort
//! inversions.

pub mod special;

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LangPair, Segment};
use crate::extraction::{ExtractionResult, Outcome};
use crate::prompts::TemplateId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("gold has {gold} values, predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("need at least 2 pairs, have {0}")]
    TooFewPairs(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("a vector has zero variance")]
    DegenerateVariance,
    #[error("differences are constant and non-zero; t is infinite")]
    ZeroVariance,
    #[error("extraction result refers to unknown segment {0}")]
    UnknownSegment(u64),
}

/// Paired gold/prediction vectors; index i refers to the same segment in
/// both. Non-finite values are rejected on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    gold: Vec<f64>,
    pred: Vec<f64>,
}

impl PairedSample {
    pub fn new(gold: Vec<f64>, pred: Vec<f64>) -> Result<Self, MetricsError> {
        if gold.len() != pred.len() {
            return Err(MetricsError::LengthMismatch {
                gold: gold.len(),
                pred: pred.len(),
            });
        }
        if gold.len() < 2 {
            return Err(MetricsError::TooFewPairs(gold.len()));
        }
        if let Some(i) = gold
            .iter()
            .zip(&pred)
            .position(|(g, p)| !g.is_finite() || !p.is_finite())
        {
            return Err(MetricsError::NonFinite(i));
        }
        Ok(PairedSample { gold, pred })
    }

    pub fn gold(&self) -> &[f64] {
        &self.gold
    }

    pub fn pred(&self) -> &[f64] {
        &self.pred
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }
}

/// Neumaier's improved Kahan summation.
#[derive(Debug, Default, Clone, Copy)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut s = CompensatedSum::default();
    for x in xs {
        s.add(x);
    }
    s.value()
}

fn mean(xs: &[f64]) -> f64 {
    compensated_sum(xs.iter().copied()) / xs.len() as f64
}

fn is_constant(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

fn pearson_slices(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if is_constant(x) || is_constant(y) {
        return Err(MetricsError::DegenerateVariance);
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = CompensatedSum::default();
    let mut sxx = CompensatedSum::default();
    let mut syy = CompensatedSum::default();
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy.add(dx * dy);
        sxx.add(dx * dx);
        syy.add(dy * dy);
    }
    let denom = sxx.value().sqrt() * syy.value().sqrt();
    if denom == 0.0 {
        return Err(MetricsError::DegenerateVariance);
    }
    Ok((sxy.value() / denom).clamp(-1.0, 1.0))
}

pub fn pearson(s: &PairedSample) -> Result<f64, MetricsError> {
    pearson_slices(&s.gold, &s.pred)
}

fn cmp_f64(a: &f64, b: &f64) -> Ordering {
    a.partial_cmp(b).expect("finite values")
}

/// 1-based ranks; tied values share the average of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| cmp_f64(&xs[i], &xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

pub fn spearman(s: &PairedSample) -> Result<f64, MetricsError> {
    pearson_slices(&average_ranks(&s.gold), &average_ranks(&s.pred))
}

/// Number of tied pairs within runs of equal adjacent values.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` and returns the number of strict inversions (i < j, v[i] > v[j]).
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (left, right) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(left, bl) + merge_count(right, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall tau-b: (C − D) / √((n₀ − n₁)(n₀ − n₂)).
pub fn kendall(s: &PairedSample) -> Result<f64, MetricsError> {
    let n = s.len() as u64;
    let mut pairs: Vec<(f64, f64)> = s.gold.iter().copied().zip(s.pred.iter().copied()).collect();
    pairs.sort_by(|a, b| cmp_f64(&a.0, &b.0).then_with(|| cmp_f64(&a.1, &b.1)));

    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ties_x = tied_pairs(&xs);
    let ties_xy = tied_pairs(&pairs);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let discordant = merge_count(&mut ys, &mut buf);
    let ties_y = tied_pairs(&ys);

    let n0 = n * (n - 1) / 2;
    let (dx, dy) = (n0 - ties_x, n0 - ties_y);
    if dx == 0 || dy == 0 {
        return Err(MetricsError::DegenerateVariance);
    }
    // C − D = n0 − n1 − n2 + n3 − 2D
    let diff = n0 as i128 - ties_x as i128 - ties_y as i128 + ties_xy as i128 - 2 * discordant as i128;
    let tau = diff as f64 / ((dx as u128 * dy as u128) as f64).sqrt();
    Ok(tau.clamp(-1.0, 1.0))
}

/// Two-tailed paired t-test on d = pred − gold. Returns `(t, p)`.
/// All-zero differences give `(0, 1)`.
pub fn paired_t_test(s: &PairedSample) -> Result<(f64, f64), MetricsError> {
    let d: Vec<f64> = s.pred.iter().zip(&s.gold).map(|(p, g)| p - g).collect();
    if is_constant(&d) {
        return if d[0] == 0.0 {
            Ok((0.0, 1.0))
        } else {
            Err(MetricsError::ZeroVariance)
        };
    }
    let n = d.len() as f64;
    let m = mean(&d);
    let ss = compensated_sum(d.iter().map(|x| (x - m) * (x - m)));
    let sd = (ss / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    let t = m / (sd / n.sqrt());
    Ok((t, special::student_t_two_tailed(t, n - 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Significance {
    /// p > 0.05
    NS,
    P05,
    P01,
    P001,
}

impl Significance {
    pub fn from_p(p: f64) -> Self {
        if p > 0.05 {
            Significance::NS
        } else if p > 0.01 {
            Significance::P05
        } else if p > 0.001 {
            Significance::P01
        } else {
            Significance::P001
        }
    }
}

/// Statistics for one (pair, template, model) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pair: LangPair,
    pub template: TemplateId,
    pub model: String,
    pub n_used: usize,
    pub n_excluded: usize,
    pub flagged_untrustworthy: bool,
    /// `None` when a vector is constant.
    pub pearson_r: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub tau_variant: String,
    /// `None` when the differences are constant and non-zero.
    pub t_stat: Option<f64>,
    pub p_value: f64,
    pub significance: Significance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub pair: LangPair,
    pub template: TemplateId,
    pub model: String,
}

/// Aligns extraction results with gold scores, dropping excluded rows from
/// both sides. Returns the sample vectors and the exclusion count.
pub fn align(gold_segments: &[Segment], results: &[ExtractionResult]) -> Result<(Vec<f64>, Vec<f64>, usize), MetricsError> {
    let by_id: HashMap<(&LangPair, u64), f64> = gold_segments
        .iter()
        .map(|s| ((&s.pair, s.id), s.da_mean))
        .collect();
    let mut gold = Vec::with_capacity(results.len());
    let mut pred = Vec::with_capacity(results.len());
    let mut excluded = 0;
    for r in results {
        let g = *by_id
            .get(&(&r.prompt_ref.pair, r.prompt_ref.segment_id))
            .ok_or(MetricsError::UnknownSegment(r.prompt_ref.segment_id))?;
        match r.outcome {
            Outcome::Score { score } => {
                gold.push(g);
                pred.push(score);
            }
            Outcome::Excluded { .. } => excluded += 1,
        }
    }
    Ok((gold, pred, excluded))
}

/// Computes all statistics for one cell. A zero-variance, non-zero shift
/// between prediction and gold is reported with `t_stat = None` and p = 0.
pub fn evaluate(
    gold_segments: &[Segment],
    results: &[ExtractionResult],
    meta: &RunMeta,
) -> Result<CorrelationReport, MetricsError> {
    let (gold, pred, n_excluded) = align(gold_segments, results)?;
    let n_used = gold.len();
    let sample = PairedSample::new(gold, pred).map_err(|e| match e {
        MetricsError::TooFewPairs(_) => MetricsError::TooFewPairs(n_used),
        other => other,
    })?;
    let (t_stat, p_value) = match paired_t_test(&sample) {
        Ok((t, p)) => (Some(t), p),
        Err(MetricsError::ZeroVariance) => (None, 0.0),
        Err(e) => return Err(e),
    };
    Ok(CorrelationReport {
        pair: meta.pair.clone(),
        template: meta.template,
        model: meta.model.clone(),
        n_used,
        n_excluded,
        flagged_untrustworthy: crate::extraction::is_untrustworthy(n_excluded, n_used + n_excluded),
        pearson_r: pearson(&sample).ok(),
        spearman_rho: spearman(&sample).ok(),
        kendall_tau: kendall(&sample).ok(),
        tau_variant: "b".into(),
        t_stat,
        p_value,
        significance: Significance::from_p(p_value),
    })
}
