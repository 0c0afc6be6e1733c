//! Hard-sampling baselines: mini-batch biased sampling and OHEM.

use log::warn;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::MatchResult;
use crate::error::{Error, Result};

/// Which anchors enter the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerStrategy {
    /// Every non-ignore anchor.
    #[default]
    None,
    /// Fixed-size subset with a target foreground fraction, per image.
    Biased { batch_size: usize, fg_fraction: f64 },
    /// The `k` highest-loss anchors, per image.
    Ohem { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(default)]
    pub strategy: SamplerStrategy,
    #[serde(default)]
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            SamplerStrategy::None => Ok(()),
            SamplerStrategy::Biased {
                batch_size,
                fg_fraction,
            } => {
                if batch_size < 2 || !(fg_fraction > 0.0 && fg_fraction < 1.0) {
                    return Err(Error::Config(format!(
                        "biased sampling needs batch_size >= 2 and fg_fraction in (0, 1), got {batch_size} / {fg_fraction}"
                    )));
                }
                Ok(())
            }
            SamplerStrategy::Ohem { k } => {
                if k == 0 {
                    return Err(Error::Config("OHEM k must be at least 1".into()));
                }
                Ok(())
            }
        }
    }
}

/// Up to `floor(fg_fraction * batch_size)` foreground anchors drawn uniformly
/// without replacement, the rest background; background fills any
/// foreground shortfall. Returned indices are sorted.
pub fn biased_sample<R: Rng + ?Sized>(
    m: &MatchResult,
    batch_size: usize,
    fg_fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let fg: Vec<usize> = m.fg_indices.clone();
    let bg: Vec<usize> = (0..m.n).filter(|&i| m.labels[i] == 0).collect();
    if fg.is_empty() && bg.is_empty() {
        return Err(Error::Config("no non-ignore anchors to sample from".into()));
    }
    if bg.is_empty() {
        warn!("biased sampling: no background anchors, subset is all foreground");
    }
    let fg_quota = ((fg_fraction * batch_size as f64).floor() as usize).min(fg.len());
    let bg_take = (batch_size - fg_quota).min(bg.len());
    // if background is short too, top up with remaining foreground
    let fg_take = (batch_size - bg_take).min(fg.len()).max(fg_quota);
    let mut out: Vec<usize> = index::sample(rng, fg.len(), fg_take)
        .into_iter()
        .map(|i| fg[i])
        .collect();
    out.extend(index::sample(rng, bg.len(), bg_take).into_iter().map(|i| bg[i]));
    out.sort_unstable();
    Ok(out)
}

/// Indices of the `k` largest losses (ties to the lowest index), sorted by
/// decreasing loss. Candidates with `NaN` loss rank last.
pub fn ohem_select(per_anchor_losses: &[f64], k: usize) -> Vec<usize> {
    let n = per_anchor_losses.len();
    if k > n {
        warn!("OHEM: k={k} exceeds {n} candidates, keeping all");
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        let key = |x: f64| if x.is_nan() { f64::NEG_INFINITY } else { x };
        let (la, lb) = (key(per_anchor_losses[a]), key(per_anchor_losses[b]));
        lb.total_cmp(&la).then(a.cmp(&b))
    });
    idx.truncate(k.min(n));
    idx
}

/// OHEM over the non-ignore anchors of `m`, with per-anchor losses given for
/// every anchor. Returns sorted anchor indices.
pub fn ohem_for_match(m: &MatchResult, per_anchor_losses: &[f64], k: usize) -> Vec<usize> {
    let candidates: Vec<usize> = (0..m.n).filter(|&i| m.labels[i] >= 0).collect();
    let losses: Vec<f64> = candidates.iter().map(|&i| per_anchor_losses[i]).collect();
    let mut out: Vec<usize> = ohem_select(&losses, k).into_iter().map(|j| candidates[j]).collect();
    out.sort_unstable();
    out
}
