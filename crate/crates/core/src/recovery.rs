//! Weighted LASSO by FISTA and the reweighted-ℓ1 loop on top of it.
//!
//! This is the vector form of the mechanism the network regularizers use:
//! solve with penalties `P`, set `P_i = 1/(|w_i| + ε)`, solve again.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoSettings {
    pub lambda: f64,
    pub max_iter: usize,
    /// Stop when `‖w_k − w_{k−1}‖∞` falls below this.
    pub tol: f64,
}

impl Default for LassoSettings {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            max_iter: 20_000,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoSolution {
    pub w: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn matvec(x: &Tensor, v: &[f64]) -> Vec<f64> {
    let n = x.shape()[1];
    x.data().chunks_exact(n).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn matvec_t(x: &Tensor, r: &[f64]) -> Vec<f64> {
    let n = x.shape()[1];
    let mut out = vec![0.0; n];
    for (row, &ri) in x.data().chunks_exact(n).zip(r) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * ri;
        }
    }
    out
}

/// Largest eigenvalue of `XᵀX` by power iteration, padded by 1% for safety.
pub fn lipschitz(x: &Tensor) -> f64 {
    let n = x.shape()[1];
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut est = 0.0;
    for _ in 0..200 {
        let w = matvec_t(x, &matvec(x, &v));
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 1.0;
        }
        v = w.into_iter().map(|a| a / norm).collect();
        if (norm - est).abs() <= 1e-10 * norm {
            est = norm;
            break;
        }
        est = norm;
    }
    1.01 * est
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Minimize `½‖Xw − y‖² + λ Σ P_i |w_i|` over `w`.
pub fn weighted_lasso(
    x: &Tensor,
    y: &[f64],
    penalties: &[f64],
    settings: &LassoSettings,
    warm_start: Option<&[f64]>,
) -> Result<LassoSolution> {
    let &[m, n] = x.shape() else {
        return Err(Error::shape(format!("design must be a matrix, got {:?}", x.shape())));
    };
    if y.len() != m || penalties.len() != n {
        return Err(Error::shape(format!(
            "design {m}x{n} with {} targets and {} penalties",
            y.len(),
            penalties.len()
        )));
    }
    if !(settings.lambda >= 0.0) || penalties.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::invalid("penalties and lambda must be nonnegative"));
    }
    let step = 1.0 / lipschitz(x);
    let mut w = warm_start.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    if w.len() != n {
        return Err(Error::shape("warm start length differs from design width"));
    }
    let mut z = w.clone();
    let mut t = 1.0f64;
    for it in 1..=settings.max_iter {
        let residual: Vec<f64> = matvec(x, &z).iter().zip(y).map(|(a, b)| a - b).collect();
        let grad = matvec_t(x, &residual);
        let next: Vec<f64> = z
            .iter()
            .zip(&grad)
            .zip(penalties)
            .map(|((zi, gi), p)| soft(zi - step * gi, step * settings.lambda * p))
            .collect();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        let change = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        z = next.iter().zip(&w).map(|(a, b)| a + momentum * (a - b)).collect();
        w = next;
        t = t_next;
        if change < settings.tol {
            return Ok(LassoSolution {
                w,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(LassoSolution {
        w,
        iterations: settings.max_iter,
        converged: false,
    })
}

/// `rounds` weighted solves; the first uses unit penalties, later ones
/// `1/(|w| + ε)` from the previous solution. Returns every round's solution.
pub fn reweighted_l1(x: &Tensor, y: &[f64], settings: &LassoSettings, rounds: usize, epsilon: f64) -> Result<Vec<LassoSolution>> {
    if rounds == 0 || !(epsilon > 0.0) {
        return Err(Error::invalid("reweighting needs at least one round and epsilon > 0"));
    }
    let n = x.shape().get(1).copied().unwrap_or(0);
    let mut penalties = vec![1.0; n];
    let mut out: Vec<LassoSolution> = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let warm = out.last().map(|s| s.w.as_slice());
        let sol = weighted_lasso(x, y, &penalties, settings, warm)?;
        penalties = sol.w.iter().map(|w| 1.0 / (w.abs() + epsilon)).collect();
        out.push(sol);
    }
    Ok(out)
}

/// Sorted indices with `|w_i| > tau`.
pub fn support_of(w: &[f64], tau: f64) -> Vec<usize> {
    w.iter().enumerate().filter(|(_, v)| v.abs() > tau).map(|(i, _)| i).collect()
}

/// F1 score of an estimated support against the truth; both sorted.
pub fn support_f1(estimate: &[usize], truth: &[usize]) -> f64 {
    if estimate.is_empty() && truth.is_empty() {
        return 1.0;
    }
    let hits = estimate.iter().filter(|i| truth.binary_search(i).is_ok()).count() as f64;
    2.0 * hits / (estimate.len() + truth.len()) as f64
}
