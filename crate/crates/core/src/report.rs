//! Rates, storage accounting, magnitude histograms and the two baselines
//! (iterative magnitude pruning, static ℓ1) the reweighted pipeline is
//! compared against.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{evaluate, Network, TrainSettings, Trainer};
use crate::pipeline::{run_reweighted_step, Observer, PruneStepConfig, StepOutcome, StepReport, ThresholdPolicy};
use crate::regularizers::{PenaltySchedule, RegularizerKind};
use crate::seed::derive_seed;
use crate::tensor::{SparsityMask, Tensor};

/// Weight and nonzero counts of one parametric layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub name: String,
    pub total: usize,
    pub nonzero: usize,
    pub conv: bool,
}

/// Counts of exact nonzero weights per layer (biases excluded).
pub fn layer_counts(net: &Network) -> Vec<LayerCount> {
    net.layer_names()
        .into_iter()
        .zip(net.params())
        .enumerate()
        .map(|(i, (name, p))| LayerCount {
            name,
            total: p.weight.len(),
            nonzero: p.weight.data().iter().filter(|&&x| x != 0.0).count(),
            conv: net.is_conv(i),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateScope {
    Overall,
    ConvOnly,
    Layer(usize),
}

/// `Σ n / Σ nnz` over the scope. A scope with no surviving weights yields
/// `f64::INFINITY`; an empty scope (e.g. conv-only on an MLP) is an error.
pub fn pruning_rate(counts: &[LayerCount], scope: RateScope) -> Result<f64> {
    let selected: Vec<&LayerCount> = match scope {
        RateScope::Overall => counts.iter().collect(),
        RateScope::ConvOnly => counts.iter().filter(|c| c.conv).collect(),
        RateScope::Layer(i) => counts.get(i).into_iter().collect(),
    };
    if selected.is_empty() {
        return Err(Error::invalid(format!("no layers in scope {scope:?}")));
    }
    let total: usize = selected.iter().map(|c| c.total).sum();
    let nonzero: usize = selected.iter().map(|c| c.nonzero).sum();
    Ok(if nonzero == 0 {
        f64::INFINITY
    } else {
        total as f64 / nonzero as f64
    })
}

/// Rate of a pattern mask measured over kernels that still hold weights:
/// `9 · surviving kernels / kept positions` for 3×3 kernels.
pub fn pattern_rate(mask: &SparsityMask) -> Result<f64> {
    let shape = mask.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("pattern rate needs a 4-D mask, got {shape:?}")));
    }
    let k = shape[2] * shape[3];
    let (mut positions, mut kept) = (0usize, 0usize);
    for kernel in mask.keep().chunks(k) {
        let n = kernel.iter().filter(|&&b| b).count();
        if n > 0 {
            positions += k;
            kept += n;
        }
    }
    Ok(if kept == 0 {
        f64::INFINITY
    } else {
        positions as f64 / kept as f64
    })
}

pub const DEFAULT_INDEX_BITS: u32 = 5;
pub const DENSE_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerBits {
    pub bits: u32,
    pub nonzero: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionModel {
    pub layers: Vec<LayerBits>,
    pub index_bits: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionRates {
    pub data_rate: f64,
    pub model_rate: f64,
}

impl CompressionModel {
    pub fn new(layers: Vec<LayerBits>) -> Self {
        Self {
            layers,
            index_bits: DEFAULT_INDEX_BITS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("compression model has no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if !(1..=32).contains(&l.bits) {
                return Err(Error::invalid(format!("layer {i}: bit width {} outside [1, 32]", l.bits)));
            }
            if l.nonzero > l.total {
                return Err(Error::invalid(format!(
                    "layer {i}: {} nonzeros exceed {} weights",
                    l.nonzero, l.total
                )));
            }
        }
        if self.layers.iter().all(|l| l.nonzero == 0) {
            return Err(Error::invalid("compression model has no nonzero weights"));
        }
        Ok(())
    }
}

/// `data = 32·Σn / Σ q·nnz`, `model = 32·Σn / Σ (q + r)·nnz`.
pub fn compression_rates(model: &CompressionModel) -> Result<CompressionRates> {
    model.validate()?;
    let dense: f64 = model.layers.iter().map(|l| DENSE_BITS as f64 * l.total as f64).sum();
    let data: f64 = model.layers.iter().map(|l| l.bits as f64 * l.nonzero as f64).sum();
    let with_index: f64 = model
        .layers
        .iter()
        .map(|l| (l.bits + model.index_bits) as f64 * l.nonzero as f64)
        .sum();
    Ok(CompressionRates {
        data_rate: dense / data,
        model_rate: dense / with_index,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// log10 of the lower magnitude edge.
    pub log10_lo: f64,
    pub log10_hi: f64,
    pub count: usize,
}

/// Counts of `|w|` per log10 bin, contiguous from the smallest to the largest
/// populated bin (empty bins in between are kept, so gaps are visible).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeHistogram {
    pub bin_width: f64,
    pub zeros: usize,
    pub bins: Vec<HistogramBin>,
}

impl MagnitudeHistogram {
    pub fn total(&self) -> usize {
        self.zeros + self.bins.iter().map(|b| b.count).sum::<usize>()
    }

    /// `log10_lo,log10_hi,count,zero_count` (zero count repeated per row).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("log10_lo,log10_hi,count,zero_count\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{},{}", b.log10_lo, b.log10_hi, b.count, self.zeros);
        }
        out
    }
}

pub fn magnitude_histogram(weights: &[f64], bin_width: f64) -> Result<MagnitudeHistogram> {
    if weights.is_empty() {
        return Err(Error::invalid("histogram of an empty layer"));
    }
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::invalid(format!("bin width must be positive, got {bin_width}")));
    }
    let mut zeros = 0;
    let mut ids = Vec::with_capacity(weights.len());
    for &w in weights {
        if !w.is_finite() {
            return Err(Error::invalid("histogram of non-finite weights"));
        }
        if w == 0.0 {
            zeros += 1;
        } else {
            ids.push((w.abs().log10() / bin_width).floor() as i64);
        }
    }
    let bins = match (ids.iter().min(), ids.iter().max()) {
        (Some(&lo), Some(&hi)) => {
            let mut counts = vec![0usize; (hi - lo + 1) as usize];
            for id in &ids {
                counts[(id - lo) as usize] += 1;
            }
            counts
                .into_iter()
                .enumerate()
                .map(|(j, count)| {
                    let b = lo + j as i64;
                    HistogramBin {
                        log10_lo: b as f64 * bin_width,
                        log10_hi: (b + 1) as f64 * bin_width,
                        count,
                    }
                })
                .collect()
        }
        _ => Vec::new(),
    };
    Ok(MagnitudeHistogram { bin_width, zeros, bins })
}

/// Per-layer rate table: `layer,total,nonzero,rate`.
pub fn rates_csv(counts: &[LayerCount]) -> String {
    let mut out = String::from("layer,total,nonzero,rate\n");
    for c in counts {
        let rate = if c.nonzero == 0 {
            f64::INFINITY
        } else {
            c.total as f64 / c.nonzero as f64
        };
        let _ = writeln!(out, "{},{},{},{}", c.name, c.total, c.nonzero, rate);
    }
    out
}

/// One row per layer per step:
/// `step,layer,total,kept,rate,threshold,accuracy_before,accuracy_after,failed`.
pub fn step_reports_csv(reports: &[StepReport]) -> String {
    let mut out = String::from("step,layer,total,kept,rate,threshold,accuracy_before,accuracy_after,failed\n");
    for r in reports {
        for l in &r.layers {
            let tau = l.threshold.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.step, l.name, l.total, l.kept, l.rate, tau, r.accuracy_before, r.accuracy_after, r.failed
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeRound {
    pub target: f64,
    pub rate: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub accuracy_before: f64,
    pub rounds: Vec<MagnitudeRound>,
}

impl BaselineReport {
    /// Largest achieved rate whose accuracy stays within `tolerance` of the start.
    pub fn best_rate_within(&self, tolerance: f64) -> f64 {
        self.rounds
            .iter()
            .filter(|r| self.accuracy_before - r.accuracy <= tolerance)
            .map(|r| r.rate)
            .fold(1.0, f64::max)
    }
}

/// Tighten the masks so that exactly `keep` weights survive network-wide,
/// pruning in ascending `(|w|, layer, flat index)` order.
pub fn magnitude_mask(net: &mut Network, keep: usize) -> Result<()> {
    let mut order: Vec<(f64, usize, usize)> = Vec::new();
    for (li, p) in net.params().iter().enumerate() {
        let mask = net.mask_or_ones(li);
        for (j, (&w, &k)) in p.weight.data().iter().zip(mask.keep()).enumerate() {
            order.push((if k { w.abs() } else { -1.0 }, li, j));
        }
    }
    if keep > order.len() {
        return Err(Error::invalid(format!("cannot keep {keep} of {} weights", order.len())));
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut masks: Vec<SparsityMask> = (0..net.depth()).map(|i| net.mask_or_ones(i)).collect();
    for &(_, li, j) in &order[..order.len() - keep] {
        masks[li].prune(j);
    }
    for (i, m) in masks.into_iter().enumerate() {
        net.set_mask(i, m)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MagnitudeConfig {
    pub rounds: usize,
    pub retrain_epochs: usize,
    pub train: TrainSettings,
    pub seed: u64,
}

impl Default for MagnitudeConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            retrain_epochs: 2,
            train: TrainSettings::default(),
            seed: 0,
        }
    }
}

/// Iterative magnitude pruning: `rounds` prune-then-retrain rounds on the
/// geometric schedule `target^(k/rounds)`.
pub fn baseline_magnitude_prune(
    net: &Network,
    train: &Dataset,
    eval: &Dataset,
    target: f64,
    cfg: &MagnitudeConfig,
) -> Result<(Network, BaselineReport)> {
    let targets: Vec<f64> = (1..=cfg.rounds.max(1))
        .map(|k| target.powf(k as f64 / cfg.rounds.max(1) as f64))
        .collect();
    magnitude_schedule(net, train, eval, &targets, cfg)
}

/// Iterative magnitude pruning through an explicit list of increasing
/// targets, recording the accuracy reached after each retrain.
pub fn magnitude_schedule(
    net: &Network,
    train: &Dataset,
    eval: &Dataset,
    targets: &[f64],
    cfg: &MagnitudeConfig,
) -> Result<(Network, BaselineReport)> {
    let total: usize = net.params().iter().map(|p| p.weight.len()).sum();
    for &t in targets {
        if !(t >= 1.0 && t.is_finite()) {
            return Err(Error::invalid(format!("target rate must be at least 1, got {t}")));
        }
        if ((total as f64) / t + 1e-9).floor() < 1.0 {
            return Err(Error::invalid(format!("target rate {t} leaves no weight out of {total}")));
        }
    }
    let accuracy_before = evaluate(net, eval)?;
    let mut current = net.clone();
    let mut rounds = Vec::with_capacity(targets.len());
    for (k, &t) in targets.iter().enumerate() {
        let keep = ((total as f64) / t + 1e-9).floor() as usize;
        magnitude_mask(&mut current, keep)?;
        let mut trainer = Trainer::new(&current, cfg.train, derive_seed(cfg.seed, &format!("magnitude{k}")))?;
        for _ in 0..cfg.retrain_epochs {
            trainer.epoch(&mut current, train, &[])?;
        }
        let kept: usize = (0..current.depth()).map(|i| current.mask_or_ones(i).kept()).sum();
        rounds.push(MagnitudeRound {
            target: t,
            rate: total as f64 / kept as f64,
            accuracy: evaluate(&current, eval)?,
        });
    }
    Ok((current, BaselineReport { accuracy_before, rounds }))
}

/// One regularized solve with `P ≡ 1` held fixed, then the usual
/// threshold / prune / retrain tail.
pub fn baseline_static_l1(
    net: &Network,
    train: &Dataset,
    eval: &Dataset,
    lambda: f64,
    epochs: usize,
    policy: ThresholdPolicy,
    base: &PruneStepConfig,
    observer: &mut dyn Observer,
) -> Result<StepOutcome> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let cfg = PruneStepConfig {
        iterations: 1,
        epochs_per_iteration: epochs,
        lambda: Some(lambda),
        schedule: PenaltySchedule::StaticOnes,
        threshold: policy,
        ..base.clone()
    };
    run_reweighted_step(net, train, eval, &cfg, RegularizerKind::NonStructured, observer)
}

/// Fraction of surviving weights whose regularized magnitude fell below the
/// `quantile` point of the layer's pre-regularization magnitudes.
pub fn critical_weight_fraction(
    pretrained: &[Tensor],
    regularized: &[Tensor],
    survivors: &[SparsityMask],
    quantile: f64,
) -> Result<f64> {
    if pretrained.len() != regularized.len() || pretrained.len() != survivors.len() {
        return Err(Error::invalid("layer count mismatch in critical-weight statistic"));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::invalid("quantile must lie in [0, 1]"));
    }
    let (mut hits, mut kept) = (0usize, 0usize);
    for ((pre, post), mask) in pretrained.iter().zip(regularized).zip(survivors) {
        pre.expect_same_shape(post)?;
        if mask.shape() != pre.shape() {
            return Err(Error::shape("survivor mask shape mismatch"));
        }
        let mut mags: Vec<f64> = pre.data().iter().map(|x| x.abs()).collect();
        mags.sort_by(f64::total_cmp);
        let cut = mags[((mags.len() as f64 * quantile) as usize).min(mags.len() - 1)];
        for (x, &k) in post.data().iter().zip(mask.keep()) {
            if k {
                kept += 1;
                if x.abs() < cut {
                    hits += 1;
                }
            }
        }
    }
    if kept == 0 {
        return Err(Error::invalid("no surviving weights"));
    }
    Ok(hits as f64 / kept as f64)
}
