use serde::{Deserialize, Serialize};

use super::network::{apply_gradient_mask, Gradients, Network, Param};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn sgd_default() -> Self {
        OptimizerKind::Sgd {
            lr: 0.01,
            momentum: 0.9,
        }
    }

    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam_default()
    }
}

/// Optimizer kind plus per-parameter moment buffers and the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    t: u64,
    first: Vec<Param>,
    second: Vec<Param>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, net: &Network) -> Self {
        let zeros: Vec<Param> = net.params().iter().map(Param::zeros_like).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            t: 0,
            first: zeros,
            second,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Gradients at masked positions are zeroed first and masked
    /// weights are re-zeroed afterwards; weights of `frozen` layers are left
    /// untouched (their biases still train).
    pub fn step(&mut self, net: &mut Network, grads: &mut Gradients, frozen: &[bool]) -> Result<()> {
        if grads.layers.len() != net.depth() || self.first.len() != net.depth() {
            return Err(Error::shape("gradient/optimizer layer count mismatch"));
        }
        apply_gradient_mask(grads, net.masks())?;
        self.t += 1;
        let t = self.t as i32;
        for (i, (p, g)) in net.params_mut().iter_mut().zip(&grads.layers).enumerate() {
            let skip_weight = frozen.get(i).copied().unwrap_or(false);
            match self.kind {
                OptimizerKind::Sgd { lr, momentum } => {
                    let v = &mut self.first[i];
                    if !skip_weight {
                        sgd(p.weight.data_mut(), g.weight.data(), v.weight.data_mut(), lr, momentum);
                    }
                    sgd(&mut p.bias, &g.bias, &mut v.bias, lr, momentum);
                }
                OptimizerKind::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    let hp = AdamHyper {
                        lr,
                        beta1,
                        beta2,
                        eps,
                        c1,
                        c2,
                    };
                    if !skip_weight {
                        adam(p.weight.data_mut(), g.weight.data(), m.weight.data_mut(), v.weight.data_mut(), &hp);
                    }
                    adam(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias, &hp);
                }
            }
        }
        net.enforce_masks();
        Ok(())
    }
}

fn sgd(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

struct AdamHyper {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
}

fn adam(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], hp: &AdamHyper) {
    for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m).zip(v) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let mhat = *m / hp.c1;
        let vhat = *v / hp.c2;
        *w -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
    }
}
