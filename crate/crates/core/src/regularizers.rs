//! Reweighted ℓ1 and reweighted group regularizers.
//!
//! Each regularized layer carries a penalty tensor `P`: one coefficient per
//! weight for [`RegularizerKind::NonStructured`], one per group otherwise.
//! The regularizer value is
//!
//! ```text
//! non-structured:  λ · Σ P ∘ |W|
//! group kinds:     λ · Σ_g P_g · ||W_g||_F²
//! ```
//!
//! and penalties are refreshed between inner solves as `1 / (|w| + ε)` or
//! `1 / (||W_g||_F² + ε)`. With fresh penalties the value approximates the
//! number of nonzero weights (or groups) from below.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, Network, Objective};
use crate::tensor::{group_assignment, group_count, GroupKind, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    NonStructured,
    FilterWise,
    ShapeWise,
    KernelWise,
}

impl RegularizerKind {
    pub fn group_kind(self) -> Option<GroupKind> {
        match self {
            RegularizerKind::NonStructured => None,
            RegularizerKind::FilterWise => Some(GroupKind::Filter),
            RegularizerKind::ShapeWise => Some(GroupKind::ShapePosition),
            RegularizerKind::KernelWise => Some(GroupKind::Kernel),
        }
    }

    pub fn is_grouped(self) -> bool {
        self.group_kind().is_some()
    }

    /// Whether a layer with this weight shape is regularized under this kind.
    pub fn applies_to(self, weight_shape: &[usize]) -> bool {
        !self.is_grouped() || weight_shape.len() == 4
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegularizerKind::NonStructured => "nonstructured",
            RegularizerKind::FilterWise => "filter",
            RegularizerKind::ShapeWise => "shape",
            RegularizerKind::KernelWise => "kernel",
        })
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "nonstructured" | "elementwise" => Ok(RegularizerKind::NonStructured),
            "filter" | "filterwise" => Ok(RegularizerKind::FilterWise),
            "shape" | "shapewise" => Ok(RegularizerKind::ShapeWise),
            "kernel" | "kernelwise" => Ok(RegularizerKind::KernelWise),
            _ => Err(Error::invalid(format!("unknown regularizer kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    pub lambda: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        check_epsilon(self.epsilon)
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("epsilon must be positive, got {eps}")))
    }
}

/// Penalty coefficients for one layer at reweighting iteration `iteration`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyTensor {
    kind: RegularizerKind,
    weight_shape: Vec<usize>,
    values: Vec<f64>,
    /// Group id per weight element (group kinds only).
    group_of: Option<Vec<usize>>,
    iteration: usize,
}

impl PenaltyTensor {
    /// All-ones penalties (plain ℓ1 / plain group regularization).
    pub fn ones(kind: RegularizerKind, weight_shape: &[usize]) -> Result<Self> {
        let (count, group_of) = layout(kind, weight_shape)?;
        Ok(Self {
            kind,
            weight_shape: weight_shape.to_vec(),
            values: vec![1.0; count],
            group_of,
            iteration: 0,
        })
    }

    pub fn kind(&self) -> RegularizerKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn weight_shape(&self) -> &[usize] {
        &self.weight_shape
    }

    fn check(&self, w: &Tensor) -> Result<()> {
        if w.shape() != self.weight_shape.as_slice() {
            return Err(Error::shape(format!(
                "penalties built for {:?} applied to weight {:?}",
                self.weight_shape,
                w.shape()
            )));
        }
        Ok(())
    }

    /// Per-element coefficient: `P` itself, or `P_g` of the element's group.
    #[inline]
    fn coefficient(&self, element: usize) -> f64 {
        match &self.group_of {
            None => self.values[element],
            Some(g) => self.values[g[element]],
        }
    }
}

fn layout(kind: RegularizerKind, shape: &[usize]) -> Result<(usize, Option<Vec<usize>>)> {
    match kind.group_kind() {
        None => Ok((shape.iter().product(), None)),
        Some(g) => Ok((group_count(shape, g)?, Some(group_assignment(shape, g)?))),
    }
}

fn reweight(kind: RegularizerKind, w: &Tensor, eps: f64, iteration: usize) -> Result<PenaltyTensor> {
    check_epsilon(eps)?;
    if !w.all_finite() {
        return Err(Error::invalid("penalty update on non-finite weights"));
    }
    let (count, group_of) = layout(kind, w.shape())?;
    let values = match &group_of {
        None => w.data().iter().map(|x| 1.0 / (x.abs() + eps)).collect(),
        Some(groups) => {
            let mut sq = vec![0.0; count];
            for (&g, &x) in groups.iter().zip(w.data()) {
                sq[g] += x * x;
            }
            sq.into_iter().map(|s| 1.0 / (s + eps)).collect()
        }
    };
    Ok(PenaltyTensor {
        kind,
        weight_shape: w.shape().to_vec(),
        values,
        group_of,
        iteration,
    })
}

/// Initial penalties from pretrained weights (iteration 1).
pub fn init_penalties(kind: RegularizerKind, pretrained: &Tensor, eps: f64) -> Result<PenaltyTensor> {
    reweight(kind, pretrained, eps, 1)
}

/// Penalties for the next iteration from the current solution `w`.
pub fn update_penalties(previous: &PenaltyTensor, w: &Tensor, eps: f64) -> Result<PenaltyTensor> {
    previous.check(w)?;
    reweight(previous.kind, w, eps, previous.iteration + 1)
}

pub fn reg_value(p: &PenaltyTensor, w: &Tensor, lambda: f64) -> Result<f64> {
    p.check(w)?;
    let sum: f64 = match p.group_of {
        None => w.data().iter().zip(&p.values).map(|(x, q)| q * x.abs()).sum(),
        Some(_) => w
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| p.coefficient(i) * x * x)
            .sum(),
    };
    Ok(lambda * sum)
}

/// Accumulate the regularizer gradient into `out` (P held fixed).
/// Uses `sign(0) = 0` for the ℓ1 subgradient.
pub fn add_reg_gradient(p: &PenaltyTensor, w: &Tensor, lambda: f64, out: &mut Tensor) -> Result<()> {
    p.check(w)?;
    w.expect_same_shape(out)?;
    let grouped = p.group_of.is_some();
    for (i, (g, &x)) in out.data_mut().iter_mut().zip(w.data()).enumerate() {
        *g += if grouped {
            2.0 * lambda * p.coefficient(i) * x
        } else if x == 0.0 {
            0.0
        } else {
            lambda * p.coefficient(i) * x.signum()
        };
    }
    Ok(())
}

pub fn reg_gradient(p: &PenaltyTensor, w: &Tensor, lambda: f64) -> Result<Tensor> {
    let mut out = Tensor::zeros(w.shape());
    add_reg_gradient(p, w, lambda, &mut out)?;
    Ok(out)
}

/// λ chosen so the initial regularization value sits mid-band in `[4l, 8l]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaChoice {
    pub lambda: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `loss` is the pretrained training loss, `r1` the regularizer value at
/// λ = 1 with initial penalties on the pretrained weights.
pub fn tune_lambda(loss: f64, r1: f64) -> Result<LambdaChoice> {
    if !(loss > 0.0 && loss.is_finite()) {
        return Err(Error::invalid(format!("pretrained loss must be positive, got {loss}")));
    }
    if !(r1 > 0.0 && r1.is_finite()) {
        return Err(Error::invalid(format!(
            "regularizer value at lambda=1 must be positive, got {r1} (all-zero model?)"
        )));
    }
    Ok(LambdaChoice {
        lambda: 6.0 * loss / r1,
        lower: 4.0 * loss / r1,
        upper: 8.0 * loss / r1,
    })
}

/// How penalties evolve between inner solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltySchedule {
    /// `P ← 1/(|W| + ε)` after every inner solve.
    Reweighted,
    /// `P ≡ 1`, never updated (static ℓ1 / group lasso).
    StaticOnes,
}

/// One global λ with per-layer penalties across a whole network.
#[derive(Debug, Clone)]
pub struct NetworkRegularizer {
    kind: RegularizerKind,
    lambda: f64,
    epsilon: f64,
    schedule: PenaltySchedule,
    penalties: Vec<Option<PenaltyTensor>>,
}

impl NetworkRegularizer {
    /// Regularize every eligible layer; group kinds skip dense layers and
    /// require at least one conv layer.
    pub fn new(net: &Network, kind: RegularizerKind, lambda: f64, epsilon: f64, schedule: PenaltySchedule) -> Result<Self> {
        check_epsilon(epsilon)?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
        }
        if kind.is_grouped() && !net.has_conv() {
            return Err(Error::invalid("group kind requires conv layers"));
        }
        let penalties = net
            .params()
            .iter()
            .map(|p| {
                let shape = p.weight.shape();
                if !kind.applies_to(shape) {
                    return Ok(None);
                }
                match schedule {
                    PenaltySchedule::Reweighted => init_penalties(kind, &p.weight, epsilon).map(Some),
                    PenaltySchedule::StaticOnes => PenaltyTensor::ones(kind, shape).map(Some),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            kind,
            lambda,
            epsilon,
            schedule,
            penalties,
        })
    }

    pub fn kind(&self) -> RegularizerKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda;
    }

    pub fn schedule(&self) -> PenaltySchedule {
        self.schedule
    }

    pub fn penalties(&self) -> &[Option<PenaltyTensor>] {
        &self.penalties
    }

    /// Refresh penalties from the current weights (no-op for static penalties).
    pub fn update(&mut self, net: &Network) -> Result<()> {
        if self.schedule == PenaltySchedule::StaticOnes {
            return Ok(());
        }
        for (slot, p) in self.penalties.iter_mut().zip(net.params()) {
            if let Some(prev) = slot {
                *slot = Some(update_penalties(prev, &p.weight, self.epsilon)?);
            }
        }
        Ok(())
    }

    /// `Σ_i R(P_i, W_i)` at λ = 1.
    pub fn unit_value(&self, net: &Network) -> Result<f64> {
        self.penalties
            .iter()
            .zip(net.params())
            .filter_map(|(p, w)| p.as_ref().map(|p| reg_value(p, &w.weight, 1.0)))
            .sum()
    }

    pub fn is_regularized(&self, layer: usize) -> bool {
        self.penalties.get(layer).is_some_and(|p| p.is_some())
    }
}

impl Objective for NetworkRegularizer {
    fn value(&self, net: &Network) -> Result<f64> {
        Ok(self.lambda * self.unit_value(net)?)
    }

    fn add_gradient(&self, net: &Network, grads: &mut Gradients) -> Result<()> {
        if self.lambda == 0.0 {
            return Ok(());
        }
        for ((p, w), g) in self.penalties.iter().zip(net.params()).zip(grads.layers.iter_mut()) {
            if let Some(p) = p {
                add_reg_gradient(p, &w.weight, self.lambda, &mut g.weight)?;
            }
        }
        Ok(())
    }
}
