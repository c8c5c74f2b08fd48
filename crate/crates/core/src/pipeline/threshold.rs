use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How "close to zero" is decided per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdPolicy {
    /// Look for an empty stretch of at least `min_gap_decades` in the
    /// log10-magnitude histogram; fall back to `fallback` if none separates
    /// two populated regions. `fallback = None` disables the fallback
    /// (nothing is pruned when no gap exists).
    GapDetect {
        #[serde(default = "default_bin_width")]
        bin_width: f64,
        #[serde(default = "default_min_gap")]
        min_gap_decades: f64,
        #[serde(default = "default_fallback")]
        fallback: Option<f64>,
    },
    Absolute {
        tau: f64,
    },
    /// `tau = ratio · max|w|` in the layer.
    RelativeToMax {
        ratio: f64,
    },
    /// Keep exactly `counts[layer]` largest magnitudes (ties → lowest index).
    KeepCount {
        counts: Vec<usize>,
    },
}

fn default_bin_width() -> f64 {
    0.25
}
fn default_min_gap() -> f64 {
    1.0
}
fn default_fallback() -> Option<f64> {
    Some(1e-4)
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::GapDetect {
            bin_width: default_bin_width(),
            min_gap_decades: default_min_gap(),
            fallback: default_fallback(),
        }
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            ThresholdPolicy::GapDetect {
                bin_width,
                min_gap_decades,
                fallback,
            } => *bin_width > 0.0 && *min_gap_decades > 0.0 && fallback.is_none_or(|f| f >= 0.0 && f.is_finite()),
            ThresholdPolicy::Absolute { tau } => *tau >= 0.0 && tau.is_finite(),
            ThresholdPolicy::RelativeToMax { ratio } => (0.0..=1.0).contains(ratio),
            ThresholdPolicy::KeepCount { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid threshold policy {self:?}")))
        }
    }
}

/// Threshold for one layer's magnitudes. Zero magnitudes are ignored; an
/// all-zero layer gets `tau = 0`. `KeepCount` is resolved by
/// [`prune_decision`] instead, and returns the smallest kept magnitude here.
pub fn select_threshold(magnitudes: &[f64], policy: &ThresholdPolicy, layer: usize) -> Result<f64> {
    let nonzero: Vec<f64> = magnitudes.iter().copied().filter(|m| *m > 0.0).collect();
    if nonzero.is_empty() {
        return Ok(0.0);
    }
    Ok(match policy {
        ThresholdPolicy::GapDetect {
            bin_width,
            min_gap_decades,
            fallback,
        } => gap_threshold(&nonzero, *bin_width, *min_gap_decades).or(*fallback).unwrap_or(0.0),
        ThresholdPolicy::Absolute { tau } => *tau,
        ThresholdPolicy::RelativeToMax { ratio } => ratio * nonzero.iter().cloned().fold(0.0, f64::max),
        ThresholdPolicy::KeepCount { counts } => {
            let keep = keep_count(magnitudes, count_for(counts, layer)?);
            magnitudes
                .iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(m, _)| *m)
                .fold(f64::INFINITY, f64::min)
                .min(f64::MAX)
        }
    })
}

fn count_for(counts: &[usize], layer: usize) -> Result<usize> {
    counts
        .get(layer)
        .copied()
        .ok_or_else(|| Error::invalid(format!("keep-count policy has no entry for layer {layer}")))
}

/// Geometric midpoint of the widest empty log10 stretch of at least
/// `min_gap` decades lying between two populated bins.
pub fn gap_threshold(nonzero: &[f64], bin_width: f64, min_gap: f64) -> Option<f64> {
    let mut bins: Vec<i64> = nonzero
        .iter()
        .map(|m| (m.log10() / bin_width).floor() as i64)
        .collect();
    bins.sort_unstable();
    bins.dedup();
    let mut best: Option<(i64, i64)> = None;
    for pair in bins.windows(2) {
        let empty = pair[1] - pair[0] - 1;
        if (empty as f64) * bin_width + 1e-9 < min_gap {
            continue;
        }
        // Widest wins; ties keep the lower-magnitude gap.
        if best.is_none_or(|(lo, hi)| empty > hi - lo - 1) {
            best = Some((pair[0], pair[1]));
        }
    }
    best.map(|(lo, hi)| {
        let start = (lo + 1) as f64 * bin_width;
        let end = hi as f64 * bin_width;
        10f64.powf(0.5 * (start + end))
    })
}

fn keep_count(magnitudes: &[f64], count: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..magnitudes.len()).collect();
    order.sort_by(|&a, &b| magnitudes[b].total_cmp(&magnitudes[a]).then(a.cmp(&b)));
    let mut keep = vec![false; magnitudes.len()];
    for &i in order.iter().take(count) {
        keep[i] = true;
    }
    keep
}

/// Keep flags and the threshold used, for one layer.
pub fn prune_decision(magnitudes: &[f64], policy: &ThresholdPolicy, layer: usize) -> Result<(f64, Vec<bool>)> {
    let tau = select_threshold(magnitudes, policy, layer)?;
    let keep = match policy {
        ThresholdPolicy::KeepCount { counts } => keep_count(magnitudes, count_for(counts, layer)?),
        _ => magnitudes.iter().map(|&m| m > 0.0 && m >= tau).collect(),
    };
    Ok((tau, keep))
}
