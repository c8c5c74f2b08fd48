//! Reweighted pruning steps: regularized training with periodic penalty
//! refresh, threshold selection, prune + mask, masked retraining, and the
//! multi-step chain built from them.

mod threshold;

pub use threshold::{gap_threshold, prune_decision, select_threshold, ThresholdPolicy};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{evaluate, mean_loss, EpochStats, Network, Objective, TrainSettings, Trainer};
use crate::regularizers::{tune_lambda, NetworkRegularizer, PenaltySchedule, RegularizerKind, DEFAULT_EPSILON};
use crate::seed::derive_seed;
use crate::tensor::{group_assignment, group_count, SparsityMask, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneStepConfig {
    /// Reweighted iterations per step.
    pub iterations: usize,
    pub epochs_per_iteration: usize,
    /// Fixed λ; `None` picks it with [`tune_lambda`] on the step's input model.
    pub lambda: Option<f64>,
    pub epsilon: f64,
    pub schedule: PenaltySchedule,
    pub threshold: ThresholdPolicy,
    pub retrain_epochs: usize,
    /// Largest tolerated accuracy loss (fraction, 0.02 = 2 pp) before a step
    /// is declared failed and rolled back.
    pub max_accuracy_drop: f64,
    pub train: TrainSettings,
    /// Settings for masked retraining; defaults to `train`.
    pub retrain: Option<TrainSettings>,
    pub seed: u64,
}

impl Default for PruneStepConfig {
    fn default() -> Self {
        Self {
            iterations: 4,
            epochs_per_iteration: 25,
            lambda: None,
            epsilon: DEFAULT_EPSILON,
            schedule: PenaltySchedule::Reweighted,
            threshold: ThresholdPolicy::default(),
            retrain_epochs: 20,
            max_accuracy_drop: 0.02,
            train: TrainSettings::default(),
            retrain: None,
            seed: 0,
        }
    }
}

impl PruneStepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.epochs_per_iteration == 0 {
            return Err(Error::invalid("epochs_per_iteration must be at least 1"));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::invalid(format!("lambda must be non-negative, got {l}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.max_accuracy_drop) {
            return Err(Error::invalid("max_accuracy_drop must lie in [0, 1]"));
        }
        self.threshold.validate()?;
        self.train.validate()?;
        if let Some(r) = &self.retrain {
            r.validate()?;
        }
        Ok(())
    }

    /// Epochs a successful step consumes.
    pub fn epoch_budget(&self) -> usize {
        self.iterations * self.epochs_per_iteration + self.retrain_epochs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneReport {
    pub name: String,
    pub total: usize,
    pub kept: usize,
    /// `total / kept` (infinite when nothing survives).
    pub rate: f64,
    /// Threshold applied; `None` for layers the regularizer does not touch.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub kind: RegularizerKind,
    pub lambda: f64,
    pub layers: Vec<LayerPruneReport>,
    pub overall_rate: f64,
    pub accuracy_before: f64,
    /// After thresholding, before retraining.
    pub accuracy_pruned: f64,
    pub accuracy_after: f64,
    pub epochs: usize,
    /// The step tripped the accuracy guard and its result was discarded.
    pub failed: bool,
}

/// Which stage of a run an epoch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Regularize { iteration: usize },
    Retrain,
    Admm { iteration: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochEvent {
    pub step: usize,
    pub phase: Phase,
    pub stats: EpochStats,
}

/// Hook called after every training epoch. Errors abort the run.
pub trait Observer {
    fn on_epoch(&mut self, _event: &EpochEvent, _net: &Network) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

impl<F: FnMut(&EpochEvent, &Network) -> Result<()>> Observer for F {
    fn on_epoch(&mut self, event: &EpochEvent, net: &Network) -> Result<()> {
        self(event, net)
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub net: Network,
    /// Effective per-layer masks of `net` (all-ones for unmasked layers).
    pub masks: Vec<SparsityMask>,
    pub report: StepReport,
    /// Weights at the end of regularized training, before thresholding.
    pub regularized: Vec<Tensor>,
}

/// Overall `Σ n / Σ nnz` over the kept positions of every weight layer.
pub fn overall_rate(masks: &[SparsityMask]) -> f64 {
    let total: usize = masks.iter().map(|m| m.len()).sum();
    let kept: usize = masks.iter().map(|m| m.kept()).sum();
    ratio(total, kept)
}

fn ratio(total: usize, kept: usize) -> f64 {
    if kept == 0 {
        f64::INFINITY
    } else {
        total as f64 / kept as f64
    }
}

pub fn effective_masks(net: &Network) -> Vec<SparsityMask> {
    (0..net.depth()).map(|i| net.mask_or_ones(i)).collect()
}

/// Threshold every layer the regularizer touches and install the tightened
/// masks. Group kinds compare `||W_g||_F` against τ and prune whole groups.
pub fn prune_network(
    net: &mut Network,
    kind: RegularizerKind,
    policy: &ThresholdPolicy,
) -> Result<Vec<LayerPruneReport>> {
    let names = net.layer_names();
    let mut reports = Vec::with_capacity(net.depth());
    for (i, name) in names.into_iter().enumerate() {
        let mut mask = net.mask_or_ones(i);
        let w = &net.params()[i].weight;
        let threshold = if kind.applies_to(w.shape()) {
            let (tau, keep) = match kind.group_kind() {
                None => {
                    let mags: Vec<f64> = w
                        .data()
                        .iter()
                        .zip(mask.keep())
                        .map(|(x, &k)| if k { x.abs() } else { 0.0 })
                        .collect();
                    prune_decision(&mags, policy, i)?
                }
                Some(g) => {
                    let groups = group_assignment(w.shape(), g)?;
                    let mut sq = vec![0.0; group_count(w.shape(), g)?];
                    for ((&gid, x), &k) in groups.iter().zip(w.data()).zip(mask.keep()) {
                        if k {
                            sq[gid] += x * x;
                        }
                    }
                    let norms: Vec<f64> = sq.into_iter().map(f64::sqrt).collect();
                    let (tau, keep_group) = prune_decision(&norms, policy, i)?;
                    (tau, groups.iter().map(|&g| keep_group[g]).collect())
                }
            };
            mask.intersect(&SparsityMask::new(w.shape().to_vec(), keep)?)?;
            net.set_mask(i, mask.clone())?;
            Some(tau)
        } else {
            None
        };
        reports.push(LayerPruneReport {
            name,
            total: mask.len(),
            kept: mask.kept(),
            rate: ratio(mask.len(), mask.kept()),
            threshold,
        });
    }
    Ok(reports)
}

/// One reweighted pruning step. `train` drives optimization, `eval` scores
/// accuracy for the report and the rollback guard.
pub fn run_reweighted_step(
    net: &Network,
    train: &Dataset,
    eval: &Dataset,
    cfg: &PruneStepConfig,
    kind: RegularizerKind,
    observer: &mut dyn Observer,
) -> Result<StepOutcome> {
    run_step_at(net, train, eval, cfg, kind, 0, observer)
}

/// One step as step number `step` of a chain. The index selects the step's
/// shuffle streams and is reported to the observer.
pub fn run_step_at(
    input: &Network,
    train: &Dataset,
    eval: &Dataset,
    cfg: &PruneStepConfig,
    kind: RegularizerKind,
    step: usize,
    observer: &mut dyn Observer,
) -> Result<StepOutcome> {
    cfg.validate()?;
    let accuracy_before = evaluate(input, eval)?;
    let mut net = input.clone();
    let mut reg = NetworkRegularizer::new(&net, kind, 1.0, cfg.epsilon, cfg.schedule)?;
    let lambda = match cfg.lambda {
        Some(l) => l,
        None => tune_lambda(mean_loss(&net, train)?, reg.unit_value(&net)?)?.lambda,
    };
    reg.set_lambda(lambda);

    let seeds = StageSeeds::new(cfg.seed, step);
    let mut trainer = Trainer::new(&net, cfg.train, seeds.regularize)?;
    for iteration in 1..=cfg.iterations {
        for _ in 0..cfg.epochs_per_iteration {
            let stats = trainer.epoch(&mut net, train, &[&reg as &dyn Objective])?;
            observer.on_epoch(
                &EpochEvent {
                    step,
                    phase: Phase::Regularize { iteration },
                    stats,
                },
                &net,
            )?;
        }
        reg.update(&net)?;
    }
    let regularized: Vec<Tensor> = net.params().iter().map(|p| p.weight.clone()).collect();

    let mut layers = prune_network(&mut net, kind, &cfg.threshold)?;
    let accuracy_pruned = evaluate(&net, eval)?;

    let mut retrainer = Trainer::new(&net, cfg.retrain.unwrap_or(cfg.train), seeds.retrain)?;
    for _ in 0..cfg.retrain_epochs {
        let stats = retrainer.epoch(&mut net, train, &[])?;
        observer.on_epoch(
            &EpochEvent {
                step,
                phase: Phase::Retrain,
                stats,
            },
            &net,
        )?;
    }
    let accuracy_after = evaluate(&net, eval)?;
    let failed = accuracy_before - accuracy_after > cfg.max_accuracy_drop;
    if failed {
        net = input.clone();
        layers = reports_for(&net);
    }
    let masks = effective_masks(&net);
    let report = StepReport {
        step,
        kind,
        lambda,
        overall_rate: overall_rate(&masks),
        layers,
        accuracy_before,
        accuracy_pruned,
        accuracy_after,
        epochs: cfg.epoch_budget(),
        failed,
    };
    Ok(StepOutcome {
        net,
        masks,
        report,
        regularized,
    })
}

/// Shuffle-stream seeds of one step's two training phases.
pub(crate) struct StageSeeds {
    pub regularize: u64,
    pub retrain: u64,
}

impl StageSeeds {
    pub(crate) fn new(global: u64, step: usize) -> Self {
        let seed = derive_seed(global, &format!("step{step}"));
        Self {
            regularize: derive_seed(seed, "regularize"),
            retrain: derive_seed(seed, "retrain"),
        }
    }
}

pub(crate) fn reports_for(net: &Network) -> Vec<LayerPruneReport> {
    net.layer_names()
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let m = net.mask_or_ones(i);
            LayerPruneReport {
                name,
                total: m.len(),
                kept: m.kept(),
                rate: ratio(m.len(), m.kept()),
                threshold: None,
            }
        })
        .collect()
}

pub struct MultiStepOutcome {
    pub net: Network,
    pub masks: Vec<SparsityMask>,
    /// One report per attempted step; a failed step is always last.
    pub reports: Vec<StepReport>,
}

/// Chain `steps` pruning steps, each starting from the previous result.
/// Stops after the first failed step, keeping the last good model.
pub fn run_multistep(
    net: &Network,
    train: &Dataset,
    eval: &Dataset,
    cfg: &PruneStepConfig,
    kind: RegularizerKind,
    steps: usize,
    observer: &mut dyn Observer,
) -> Result<MultiStepOutcome> {
    if steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    let mut current = net.clone();
    let mut reports = Vec::with_capacity(steps);
    for step in 0..steps {
        let out = run_step_at(&current, train, eval, cfg, kind, step, observer)?;
        let failed = out.report.failed;
        reports.push(out.report);
        current = out.net;
        if failed {
            break;
        }
    }
    Ok(MultiStepOutcome {
        masks: effective_masks(&current),
        net: current,
        reports,
    })
}
