//! ADMM splitting for hard compression constraints combined with the
//! reweighted regularizers.
//!
//! Each constrained layer carries an auxiliary copy `Z` (always feasible) and
//! a scaled dual `U`. One outer iteration trains `W` on
//! `f + λ R(P, W) + ρ/2 ||W - Z + U||²`, projects `Z = Π(W + U)`, and ascends
//! `U ← U + W - Z`. Layers assigned [`ConstraintSet::Whole`] have no
//! auxiliary variables at all.

mod constraint;

pub use constraint::{
    all_masks, build_pattern_library, is_feasible, project, project_with_support, retained_energy, ConstraintSet,
    PatternSet, QuantLevels, DEFAULT_LIBRARY_SIZE, DEFAULT_PATTERN_NNZ,
};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{evaluate, mean_loss, Gradients, Network, Objective, TrainSettings, Trainer};
use crate::pipeline::{
    effective_masks, overall_rate, prune_network, reports_for, EpochEvent, LayerPruneReport, Observer, Phase,
    StageSeeds, ThresholdPolicy,
};
use crate::regularizers::{tune_lambda, NetworkRegularizer, PenaltySchedule, RegularizerKind, DEFAULT_EPSILON};
use crate::report::pattern_rate;
use crate::tensor::{SparsityMask, Tensor};

/// The soft (regularized) part of a combined task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmRegularizer {
    pub kind: RegularizerKind,
    /// `None` tunes λ on the input model.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_schedule")]
    pub schedule: PenaltySchedule,
    /// Threshold applied after the hard projection; `None` skips the soft prune.
    #[serde(default)]
    pub threshold: Option<ThresholdPolicy>,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_schedule() -> PenaltySchedule {
    PenaltySchedule::Reweighted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmConfig {
    pub rho: f64,
    /// Outer ADMM iterations K.
    pub iterations: usize,
    /// Training epochs per W-update.
    pub inner_epochs: usize,
    /// Stop once `||W - Z||_F / ||W||_F` falls below this.
    pub tolerance: f64,
    pub regularizer: Option<AdmmRegularizer>,
    pub retrain_epochs: usize,
    /// Abort after this many consecutive residual increases.
    pub divergence_window: usize,
    pub train: TrainSettings,
    pub retrain: Option<TrainSettings>,
    pub seed: u64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1e-3,
            iterations: 12,
            inner_epochs: 10,
            tolerance: 1e-2,
            regularizer: None,
            retrain_epochs: 20,
            divergence_window: 3,
            train: TrainSettings::default(),
            retrain: None,
            seed: 0,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid(format!("rho must be positive, got {}", self.rho)));
        }
        if self.iterations == 0 || self.inner_epochs == 0 {
            return Err(Error::invalid("ADMM needs at least one iteration and one inner epoch"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::invalid("tolerance must be non-negative"));
        }
        if self.divergence_window == 0 {
            return Err(Error::invalid("divergence_window must be at least 1"));
        }
        if let Some(r) = &self.regularizer {
            if !(r.epsilon > 0.0 && r.epsilon.is_finite()) {
                return Err(Error::invalid("epsilon must be positive"));
            }
            if r.lambda.is_some_and(|l| !(l >= 0.0 && l.is_finite())) {
                return Err(Error::invalid("lambda must be non-negative"));
            }
            if let Some(t) = &r.threshold {
                t.validate()?;
            }
        }
        self.train.validate()?;
        if let Some(r) = &self.retrain {
            r.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitVars {
    pub z: Tensor,
    pub u: Tensor,
}

/// Auxiliary and dual variables of every constrained layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmState {
    sets: Vec<ConstraintSet>,
    vars: Vec<Option<SplitVars>>,
    rho: f64,
    iteration: usize,
}

impl AdmmState {
    /// `Z = Π(W)`, `U = 0` for every non-trivial set.
    pub fn new(net: &Network, sets: Vec<ConstraintSet>, rho: f64) -> Result<Self> {
        if sets.len() != net.depth() {
            return Err(Error::invalid(format!(
                "{} constraint sets for {} parametric layers",
                sets.len(),
                net.depth()
            )));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::invalid(format!("rho must be positive, got {rho}")));
        }
        let vars = sets
            .iter()
            .zip(net.params())
            .map(|(set, p)| {
                if set.is_trivial() {
                    return Ok(None);
                }
                Ok(Some(SplitVars {
                    z: project(&p.weight, set)?,
                    u: Tensor::zeros(p.weight.shape()),
                }))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            sets,
            vars,
            rho,
            iteration: 0,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn sets(&self) -> &[ConstraintSet] {
        &self.sets
    }

    pub fn vars(&self, layer: usize) -> Option<&SplitVars> {
        self.vars.get(layer).and_then(|v| v.as_ref())
    }

    pub fn is_constrained(&self) -> bool {
        self.vars.iter().any(|v| v.is_some())
    }

    /// `Z ← Π(W + U)`.
    pub fn z_update(&mut self, net: &Network) -> Result<()> {
        for ((v, set), p) in self.vars.iter_mut().zip(&self.sets).zip(net.params()) {
            if let Some(v) = v {
                let mut point = p.weight.clone();
                for (x, u) in point.data_mut().iter_mut().zip(v.u.data()) {
                    *x += u;
                }
                v.z = project(&point, set)?;
            }
        }
        Ok(())
    }

    /// `U ← U + W - Z`.
    pub fn dual_update(&mut self, net: &Network) {
        for (v, p) in self.vars.iter_mut().zip(net.params()) {
            if let Some(v) = v {
                for ((u, w), z) in v.u.data_mut().iter_mut().zip(p.weight.data()).zip(v.z.data()) {
                    *u = *u + *w - *z;
                }
            }
        }
        self.iteration += 1;
    }

    /// `||W - Z||_F / ||W||_F` over constrained layers; `None` when no layer
    /// is constrained.
    pub fn primal_residual(&self, net: &Network) -> Option<f64> {
        let (mut diff, mut norm) = (0.0, 0.0);
        let mut any = false;
        for (v, p) in self.vars.iter().zip(net.params()) {
            if let Some(v) = v {
                any = true;
                for (w, z) in p.weight.data().iter().zip(v.z.data()) {
                    diff += (w - z) * (w - z);
                    norm += w * w;
                }
            }
        }
        if !any {
            return None;
        }
        Some(if norm == 0.0 {
            diff.sqrt()
        } else {
            (diff / norm).sqrt()
        })
    }
}

impl Objective for AdmmState {
    /// `Σ ρ/2 ||W - Z + U||²`.
    fn value(&self, net: &Network) -> Result<f64> {
        let mut total = 0.0;
        for (v, p) in self.vars.iter().zip(net.params()) {
            if let Some(v) = v {
                total += p
                    .weight
                    .data()
                    .iter()
                    .zip(v.z.data())
                    .zip(v.u.data())
                    .map(|((w, z), u)| (w - z + u) * (w - z + u))
                    .sum::<f64>();
            }
        }
        Ok(0.5 * self.rho * total)
    }

    fn add_gradient(&self, net: &Network, grads: &mut Gradients) -> Result<()> {
        for ((v, p), g) in self.vars.iter().zip(net.params()).zip(grads.layers.iter_mut()) {
            if let Some(v) = v {
                p.weight.expect_same_shape(&g.weight)?;
                for (((gw, w), z), u) in g.weight.data_mut().iter_mut().zip(p.weight.data()).zip(v.z.data()).zip(v.u.data()) {
                    *gw += self.rho * (w - z + u);
                }
            }
        }
        Ok(())
    }
}

/// Value and gradient of `f + λ R(P, W) + Σ ρ/2 ||W - Z + U||²` on a batch.
pub fn augmented_loss(
    net: &Network,
    inputs: &[f64],
    labels: &[usize],
    reg: Option<&NetworkRegularizer>,
    state: &AdmmState,
) -> Result<(f64, Gradients)> {
    let (mut loss, mut grads) = net.loss_and_gradients(inputs, labels)?;
    if let Some(r) = reg {
        loss += r.value(net)?;
        r.add_gradient(net, &mut grads)?;
    }
    loss += state.value(net)?;
    state.add_gradient(net, &mut grads)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmIteration {
    pub k: usize,
    pub primal_residual: Option<f64>,
    /// Mean data loss of the last inner epoch.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmReport {
    pub lambda: Option<f64>,
    pub iterations: Vec<AdmmIteration>,
    pub converged: bool,
    pub accuracy_before: f64,
    /// After the hard projection and soft prune, before retraining.
    pub accuracy_projected: f64,
    pub accuracy_after: f64,
    /// Pattern rate of each pattern-constrained layer right after projection.
    pub pattern_rates: Vec<Option<f64>>,
    pub layers: Vec<LayerPruneReport>,
    pub overall_rate: f64,
}

/// `k,primal_residual,loss,accuracy`; the residual is blank when undefined.
pub fn residual_csv(iterations: &[AdmmIteration]) -> String {
    let mut out = String::from("k,primal_residual,loss,accuracy\n");
    for it in iterations {
        let r = it.primal_residual.map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", it.k, r, it.loss, it.accuracy);
    }
    out
}

/// Flags a primal residual that keeps growing.
#[derive(Debug, Clone)]
pub(crate) struct ResidualGuard {
    window: usize,
    rising: usize,
    last: Option<f64>,
}

impl ResidualGuard {
    pub(crate) fn new(window: usize) -> Self {
        Self {
            window,
            rising: 0,
            last: None,
        }
    }

    pub(crate) fn observe(&mut self, k: usize, r: f64) -> Result<()> {
        if !r.is_finite() {
            return Err(Error::Divergence(format!("primal residual became {r} at iteration {k}")));
        }
        self.rising = if self.last.is_some_and(|p| r > p) { self.rising + 1 } else { 0 };
        self.last = Some(r);
        if self.rising >= self.window {
            return Err(Error::Divergence(format!(
                "primal residual rose {} iterations in a row (now {r:.4e} at iteration {k})",
                self.rising
            )));
        }
        Ok(())
    }
}

pub struct AdmmOutcome {
    pub net: Network,
    pub state: AdmmState,
    pub report: AdmmReport,
}

/// Full ADMM run followed by finalization: `W ← Z` on constrained layers,
/// implied masks installed (pattern / ℓ0), quantized layers frozen, optional
/// soft-prune by the regularizer's threshold, then masked retraining.
pub fn admm_run(
    net: &Network,
    train: &Dataset,
    eval: &Dataset,
    sets: Vec<ConstraintSet>,
    cfg: &AdmmConfig,
    observer: &mut dyn Observer,
) -> Result<AdmmOutcome> {
    cfg.validate()?;
    let accuracy_before = evaluate(net, eval)?;
    let mut net = net.clone();
    let mut state = AdmmState::new(&net, sets, cfg.rho)?;
    let mut reg = match &cfg.regularizer {
        Some(r) => {
            let mut reg = NetworkRegularizer::new(&net, r.kind, 1.0, r.epsilon, r.schedule)?;
            let lambda = match r.lambda {
                Some(l) => l,
                None => tune_lambda(mean_loss(&net, train)?, reg.unit_value(&net)?)?.lambda,
            };
            reg.set_lambda(lambda);
            Some(reg)
        }
        None => None,
    };

    let seeds = StageSeeds::new(cfg.seed, 0);
    let mut trainer = Trainer::new(&net, cfg.train, seeds.regularize)?;
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut converged = false;
    let mut guard = ResidualGuard::new(cfg.divergence_window);
    for k in 1..=cfg.iterations {
        let mut last_loss = f64::NAN;
        for _ in 0..cfg.inner_epochs {
            let mut terms: Vec<&dyn Objective> = Vec::with_capacity(2);
            if let Some(r) = &reg {
                terms.push(r);
            }
            if state.is_constrained() {
                terms.push(&state);
            }
            let stats = trainer.epoch(&mut net, train, &terms)?;
            last_loss = stats.mean_loss;
            observer.on_epoch(
                &EpochEvent {
                    step: 0,
                    phase: Phase::Admm { iteration: k },
                    stats,
                },
                &net,
            )?;
        }
        if let Some(r) = reg.as_mut() {
            r.update(&net)?;
        }
        state.z_update(&net)?;
        state.dual_update(&net);
        let residual = state.primal_residual(&net);
        if let Some(r) = residual {
            guard.observe(k, r)?;
        }
        log.push(AdmmIteration {
            k,
            primal_residual: residual,
            loss: last_loss,
            accuracy: evaluate(&net, eval)?,
        });
        if residual.is_some_and(|r| r < cfg.tolerance) {
            converged = true;
            break;
        }
    }

    let mut frozen = vec![false; net.depth()];
    let mut pattern_rates = vec![None; net.depth()];
    for i in 0..net.depth() {
        let Some(v) = state.vars(i) else { continue };
        let set = state.sets()[i].clone();
        let (z, support) = project_with_support(&v.z, &set)?;
        net.params_mut()[i].weight = z;
        match set {
            ConstraintSet::Quant(_) => frozen[i] = true,
            ConstraintSet::Pattern(_) | ConstraintSet::L0Budget { .. } => {
                let mut mask = net.mask_or_ones(i);
                mask.intersect(&support)?;
                if matches!(set, ConstraintSet::Pattern(_)) {
                    pattern_rates[i] = Some(pattern_rate(&support)?);
                }
                net.set_mask(i, mask)?;
            }
            ConstraintSet::Whole => {}
        }
    }
    let layers = match (&cfg.regularizer, &reg) {
        (Some(AdmmRegularizer { threshold: Some(policy), kind, .. }), Some(_)) => {
            prune_network(&mut net, *kind, policy)?
        }
        _ => reports_for(&net),
    };
    let accuracy_projected = evaluate(&net, eval)?;
    let mut retrainer = Trainer::new(&net, cfg.retrain.unwrap_or(cfg.train), seeds.retrain)?;
    retrainer.freeze(frozen);
    for _ in 0..cfg.retrain_epochs {
        let stats = retrainer.epoch(&mut net, train, &[])?;
        observer.on_epoch(
            &EpochEvent {
                step: 0,
                phase: Phase::Retrain,
                stats,
            },
            &net,
        )?;
    }
    let accuracy_after = evaluate(&net, eval)?;
    let masks: Vec<SparsityMask> = effective_masks(&net);
    let report = AdmmReport {
        lambda: reg.as_ref().map(|r| r.lambda()),
        iterations: log,
        converged,
        accuracy_before,
        accuracy_projected,
        accuracy_after,
        pattern_rates,
        layers,
        overall_rate: overall_rate(&masks),
    };
    Ok(AdmmOutcome { net, state, report })
}

/// Whether every layer of `net` lies in its set.
pub fn network_feasible(net: &Network, sets: &[ConstraintSet]) -> Result<bool> {
    for (p, set) in net.params().iter().zip(sets) {
        if !is_feasible(&p.weight, set)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Pattern constraint on every conv layer (library learned from the current
/// conv weights), no constraint on dense layers.
pub fn pattern_sets(net: &Network) -> Result<Vec<ConstraintSet>> {
    let convs: Vec<&Tensor> = (0..net.depth())
        .filter(|&i| net.is_conv(i))
        .map(|i| &net.params()[i].weight)
        .collect();
    if convs.is_empty() {
        return Err(Error::invalid("pattern task requires conv layers"));
    }
    let lib = build_pattern_library(&convs, DEFAULT_LIBRARY_SIZE, DEFAULT_PATTERN_NNZ)?;
    Ok((0..net.depth())
        .map(|i| {
            if net.is_conv(i) {
                ConstraintSet::Pattern(lib.clone())
            } else {
                ConstraintSet::Whole
            }
        })
        .collect())
}

/// Uniform quantization of every layer, `conv_bits` on conv layers and
/// `fc_bits` on dense ones, spacing frozen from the current weights.
pub fn quant_sets(net: &Network, conv_bits: u32, fc_bits: u32) -> Result<Vec<ConstraintSet>> {
    (0..net.depth())
        .map(|i| {
            let bits = if net.is_conv(i) { conv_bits } else { fc_bits };
            QuantLevels::from_weights(&net.params()[i].weight, bits).map(ConstraintSet::Quant)
        })
        .collect()
}
