use rand::Rng;
use rwprune_core::regularizers::{init_penalties, reg_value, update_penalties, RegularizerKind};
use rwprune_core::seed::{rng_from, Rng as SeedRng};
use rwprune_core::tensor::Tensor;

use crate::common::{ensure, Ctx, Outcome};

const KINDS: [RegularizerKind; 4] = [
    RegularizerKind::NonStructured,
    RegularizerKind::FilterWise,
    RegularizerKind::ShapeWise,
    RegularizerKind::KernelWise,
];

/// Magnitudes spread over 18 decades, 5% exact zeros, random signs.
fn wide_value(rng: &mut SeedRng) -> f64 {
    if rng.random_bool(0.05) {
        return 0.0;
    }
    let m = 10f64.powf(rng.random_range(-12.0..6.0));
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

fn random_weight(rng: &mut SeedRng, shape: Vec<usize>, wide: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n)
        .map(|_| if wide { wide_value(rng) } else { rng.random_range(-1.0..1.0) })
        .collect();
    // Zero whole filters and kernels now and then so empty groups occur.
    if shape.len() == 4 {
        let per_kernel = shape[2] * shape[3];
        for chunk in data.chunks_mut(per_kernel) {
            if rng.random_bool(0.05) {
                chunk.fill(0.0);
            }
        }
        let per_filter = shape[1] * per_kernel;
        for chunk in data.chunks_mut(per_filter) {
            if rng.random_bool(0.05) {
                chunk.fill(0.0);
            }
        }
    }
    Tensor::new(shape, data).unwrap()
}

/// Squared norm of each group, accumulated in row-major element order.
fn group_norms_sq(kind: RegularizerKind, shape: &[usize], data: &[f64]) -> Vec<f64> {
    if kind == RegularizerKind::NonStructured {
        return data.iter().map(|x| x * x).collect();
    }
    let (a, b, c, d) = (shape[0], shape[1], shape[2], shape[3]);
    let count = match kind {
        RegularizerKind::FilterWise => a,
        RegularizerKind::ShapeWise => b * c * d,
        _ => a * b,
    };
    let mut sq = vec![0.0; count];
    let mut flat = 0;
    for ia in 0..a {
        for ib in 0..b {
            for ic in 0..c {
                for id in 0..d {
                    let g = match kind {
                        RegularizerKind::FilterWise => ia,
                        RegularizerKind::ShapeWise => (ib * c + ic) * d + id,
                        _ => ia * b + ib,
                    };
                    sq[g] += data[flat] * data[flat];
                    flat += 1;
                }
            }
        }
    }
    sq
}

/// `1/(|w|+ε)` per element, `1/(‖W_g‖²+ε)` per group.
fn closed_form(kind: RegularizerKind, w: &Tensor, eps: f64) -> Vec<f64> {
    if kind == RegularizerKind::NonStructured {
        w.data().iter().map(|x| 1.0 / (x.abs() + eps)).collect()
    } else {
        group_norms_sq(kind, w.shape(), w.data()).into_iter().map(|s| 1.0 / (s + eps)).collect()
    }
}

fn ulps(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

fn random_shape(rng: &mut SeedRng, kind: RegularizerKind) -> Vec<usize> {
    if kind == RegularizerKind::NonStructured && rng.random_bool(0.5) {
        vec![rng.random_range(1..=20), rng.random_range(1..=20)]
    } else {
        (0..4).map(|_| rng.random_range(1..=5)).collect()
    }
}

pub fn run(_: &mut Ctx) -> Outcome {
    let mut rng = rng_from(0x9e1);

    // Closed forms, including the value R = Σ P|w| or Σ P_g‖W_g‖².
    let mut max_ulps = 0;
    let mut checked = 0usize;
    for trial in 0..400 {
        let kind = KINDS[trial % 4];
        let shape = random_shape(&mut rng, kind);
        let eps = [1e-3, 1e-6, 0.1, 1.0][trial / 4 % 4];
        let prev = init_penalties(kind, &random_weight(&mut rng, shape.clone(), false), eps)?;
        let w = random_weight(&mut rng, shape, trial % 3 == 0);
        let p = update_penalties(&prev, &w, eps)?;
        let expect = closed_form(kind, &w, eps);
        ensure!(p.values().len() == expect.len(), "{kind}: {} penalties, expected {}", p.values().len(), expect.len());
        for (a, b) in p.values().iter().zip(&expect) {
            max_ulps = max_ulps.max(ulps(*a, *b));
        }
        checked += expect.len();
        let value = reg_value(&p, &w, 1.0)?;
        let norms = group_norms_sq(kind, w.shape(), w.data());
        let oracle: f64 = if kind == RegularizerKind::NonStructured {
            w.data().iter().zip(&expect).map(|(x, p)| p * x.abs()).sum()
        } else {
            norms.iter().zip(&expect).map(|(s, p)| p * s).sum()
        };
        ensure!(
            (value - oracle).abs() <= 1e-12 * oracle.abs().max(1.0),
            "{kind}: value {value} vs closed form {oracle}"
        );
    }
    ensure!(max_ulps <= 1, "penalties differ from the closed form by {max_ulps} ulp");

    // Bounds on 10⁶ elements across every kind.
    let mut inputs = 0usize;
    for t in 0..10 {
        let eps = [1e-3, 1e-6, 0.5, 1e-2, 2.0][t % 5];
        let w = random_weight(&mut rng, vec![100, 10, 10, 10], true);
        inputs += w.len();
        for kind in KINDS {
            let p = init_penalties(kind, &w, eps)?;
            let cap = 1.0 / eps;
            if let Some(bad) = p.values().iter().find(|&&v| !(v > 0.0 && v <= cap)) {
                return Err(crate::common::Fail(format!("{kind}: penalty {bad} outside (0, {cap}]")));
            }
        }
    }
    ensure!(inputs >= 1_000_000, "only {inputs} inputs");

    // Fixed-point proxy: with P from W itself, nnz - nnz·ε/(m+ε) < R ≤ nnz.
    let mut bands = 0;
    for trial in 0..400 {
        let kind = KINDS[trial % 4];
        let eps = [1e-3, 1e-2, 0.1][trial % 3];
        let shape = random_shape(&mut rng, kind);
        let w = random_weight(&mut rng, shape, trial % 2 == 0);
        let prev = init_penalties(kind, &w, eps)?;
        let p = update_penalties(&prev, &w, eps)?;
        let value = reg_value(&p, &w, 1.0)?;
        let sizes: Vec<f64> = if kind == RegularizerKind::NonStructured {
            w.data().iter().map(|x| x.abs()).collect()
        } else {
            group_norms_sq(kind, w.shape(), w.data())
        };
        let live: Vec<f64> = sizes.into_iter().filter(|&s| s > 0.0).collect();
        let nnz = live.len() as f64;
        if live.is_empty() {
            ensure!(value == 0.0, "{kind}: all-zero weight gives value {value}");
            continue;
        }
        let m = live.iter().copied().fold(f64::INFINITY, f64::min);
        let lo = nnz - nnz * eps / (m + eps);
        let slack = 1e-12 * nnz;
        ensure!(
            value >= lo - slack && value <= nnz + slack,
            "{kind}: value {value} outside ({lo}, {nnz}] for eps {eps}"
        );
        bands += 1;
    }
    Ok(format!(
        "{checked} penalties within {max_ulps} ulp of the closed forms, {inputs} inputs x 4 kinds in (0, 1/eps], {bands} fixed-point bands hold"
    ))
}
