//! In-context exemplar selection from DA score bins.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{IclExemplar, PromptError};
use crate::corpus::{bin_of, LangPair, ScoreBin, Segment, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IclConfig {
    Icl3,
    Icl5,
    Icl7,
}

impl IclConfig {
    pub fn count(self) -> usize {
        match self {
            IclConfig::Icl3 => 3,
            IclConfig::Icl5 => 5,
            IclConfig::Icl7 => 7,
        }
    }

    /// Bins drawn once each. 3-ICL skips the two middle ranges.
    fn base_bins(self) -> &'static [ScoreBin] {
        match self {
            IclConfig::Icl3 => &[ScoreBin::B0_30, ScoreBin::B71_90, ScoreBin::B91_100],
            IclConfig::Icl5 | IclConfig::Icl7 => &ScoreBin::ALL,
        }
    }
}

/// Chosen exemplars plus any fallback warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct IclSelection {
    pub exemplars: Vec<IclExemplar>,
    pub warnings: Vec<String>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Platform-independent stream key for (seed, pair, bin).
fn stream_key(seed: u64, pair: &LangPair, bin: ScoreBin) -> u64 {
    let mut h = splitmix64(seed);
    for b in pair.to_string().bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ (bin.index() as u64 + 1))
}

/// Draws up to `want` distinct indices into `members`, skipping `taken`.
/// Each draw is uniform over what is left.
fn draw_distinct(rng: &mut ChaCha8Rng, members: &[usize], taken: &mut Vec<usize>, want: usize) -> Vec<usize> {
    let mut picked = Vec::with_capacity(want);
    for _ in 0..want {
        let free: Vec<usize> = members.iter().copied().filter(|m| !taken.contains(m)).collect();
        if free.is_empty() {
            break;
        }
        let choice = free[rng.random_range(0..free.len())];
        taken.push(choice);
        picked.push(choice);
    }
    picked
}

/// Picks scored exemplars from the training split.
///
/// 5-ICL takes one segment from each bin, 3-ICL one from each of 0-30, 71-90
/// and 91-100, and 7-ICL the 5-ICL set plus a second distinct segment from
/// the lowest and the highest non-empty bins. Within a bin the pick is
/// uniform under a ChaCha stream keyed by `(seed, pair, bin)`, so adding or
/// removing segments in one bin never changes the draw in another. The
/// result is ordered by ascending bin.
///
/// When a bin cannot supply enough segments, `fallback` substitutes from the
/// nearest bin that still has unused members (lower bin first on ties) and
/// records a warning; otherwise the call fails with [`PromptError::EmptyBin`].
pub fn select_icl_exemplars(
    train: &[Segment],
    config: IclConfig,
    seed: u64,
    fallback: bool,
) -> Result<IclSelection, PromptError> {
    let first = train.first().ok_or(PromptError::EmptyTrain)?;
    if let Some(s) = train.iter().find(|s| s.split != Split::Train) {
        return Err(PromptError::TestSplitExemplar(s.id));
    }
    let pair = &first.pair;

    let mut members: BTreeMap<ScoreBin, Vec<usize>> = ScoreBin::ALL.iter().map(|&b| (b, Vec::new())).collect();
    for (i, s) in train.iter().enumerate() {
        let bin = bin_of(s.da_mean).map_err(|_| PromptError::EmptyBin(ScoreBin::B0_30))?;
        members.get_mut(&bin).expect("all bins present").push(i);
    }

    let mut demand: BTreeMap<ScoreBin, usize> = BTreeMap::new();
    for &b in config.base_bins() {
        *demand.entry(b).or_default() += 1;
    }
    if config == IclConfig::Icl7 {
        let non_empty: Vec<ScoreBin> = members.iter().filter(|(_, m)| !m.is_empty()).map(|(&b, _)| b).collect();
        if let (Some(&lo), Some(&hi)) = (non_empty.first(), non_empty.last()) {
            *demand.entry(lo).or_default() += 1;
            *demand.entry(hi).or_default() += 1;
        }
    }

    let mut rngs: BTreeMap<ScoreBin, ChaCha8Rng> = ScoreBin::ALL
        .iter()
        .map(|&b| (b, ChaCha8Rng::seed_from_u64(stream_key(seed, pair, b))))
        .collect();
    let mut taken = Vec::new();
    let mut picks: Vec<(ScoreBin, usize)> = Vec::new();
    let mut shortfall: Vec<(ScoreBin, usize)> = Vec::new();
    for (&bin, &want) in &demand {
        let rng = rngs.get_mut(&bin).expect("all bins present");
        let got = draw_distinct(rng, &members[&bin], &mut taken, want);
        if got.len() < want {
            shortfall.push((bin, want - got.len()));
        }
        picks.extend(got.into_iter().map(|i| (bin, i)));
    }

    let mut warnings = Vec::new();
    for (bin, missing) in shortfall {
        if !fallback {
            return Err(PromptError::EmptyBin(bin));
        }
        for _ in 0..missing {
            let substitute = nearest_bins(bin)
                .into_iter()
                .find(|b| members[b].iter().any(|m| !taken.contains(m)))
                .ok_or(PromptError::EmptyBin(bin))?;
            // Substitutes continue the requesting bin's stream.
            let rng = rngs.get_mut(&bin).expect("all bins present");
            let got = draw_distinct(rng, &members[&substitute], &mut taken, 1);
            picks.extend(got.into_iter().map(|i| (substitute, i)));
            let msg = format!("{pair}: bin {bin} short of segments, substituted from bin {substitute}");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    // Stable: within a bin the draw order is kept.
    picks.sort_by_key(|&(bin, _)| bin);
    Ok(IclSelection {
        exemplars: picks
            .into_iter()
            .map(|(bin, i)| IclExemplar {
                segment: train[i].clone(),
                bin,
            })
            .collect(),
        warnings,
    })
}

/// Other bins ordered by distance from `bin`, lower first on ties.
fn nearest_bins(bin: ScoreBin) -> Vec<ScoreBin> {
    let i = bin.index() as isize;
    let mut others: Vec<ScoreBin> = ScoreBin::ALL.into_iter().filter(|&b| b != bin).collect();
    others.sort_by_key(|b| {
        let j = b.index() as isize;
        ((j - i).abs(), j > i)
    });
    others
}
