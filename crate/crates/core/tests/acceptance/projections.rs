use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rwprune_core::admm::{
    admm_run, all_masks, network_feasible, pattern_sets, project_with_support, AdmmConfig, ConstraintSet, PatternSet,
    QuantLevels,
};
use rwprune_core::data::gen_gaussian_classes;
use rwprune_core::nn::{small_convnet, Network, OptimizerKind, TrainSettings};
use rwprune_core::report::pattern_rate;
use rwprune_core::seed::{rng_from, Rng as SeedRng};
use rwprune_core::tensor::Tensor;

use crate::common::{ensure, uniform, Ctx, Fail, Outcome};

fn random_library(rng: &mut SeedRng) -> PatternSet {
    let all = all_masks(9, 4);
    let picks = sample(rng, all.len(), 8);
    PatternSet::new([3, 3], picks.iter().map(|i| all[i].clone()).collect()).unwrap()
}

/// Exhaustive search over the library: smallest discarded energy, first index on ties.
fn pattern_oracle(kernel: &[f64], lib: &PatternSet) -> (Vec<f64>, Vec<bool>) {
    let mut best: Option<(f64, usize)> = None;
    for (j, m) in lib.masks.iter().enumerate() {
        let dropped: f64 = kernel.iter().zip(m).filter(|(_, &k)| !k).map(|(x, _)| x * x).sum();
        if best.is_none_or(|(d, _)| dropped < d) {
            best = Some((dropped, j));
        }
    }
    let m = &lib.masks[best.unwrap().1];
    (kernel.iter().zip(m).map(|(&x, &k)| if k { x } else { 0.0 }).collect(), m.clone())
}

/// Enumerate every level `kΔ`; nearest wins, ties go to the smaller `|k|`.
fn quant_oracle(x: f64, q: &QuantLevels) -> f64 {
    if q.delta == 0.0 {
        return 0.0;
    }
    let top = q.max_level();
    let mut best = (f64::INFINITY, 0i64);
    for k in -top..=top {
        let d = (x - k as f64 * q.delta).abs();
        if d < best.0 || (d == best.0 && k.abs() < best.1.abs()) {
            best = (d, k);
        }
    }
    best.1 as f64 * q.delta
}

/// Every support of size `keep`; least discarded energy, then the
/// lexicographically smallest index set.
fn l0_oracle(x: &[f64], keep: usize) -> Vec<bool> {
    let n = x.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize != keep {
            continue;
        }
        let set: Vec<usize> = (0..n).filter(|i| bits >> i & 1 == 1).collect();
        let dropped: f64 = (0..n).filter(|i| bits >> i & 1 == 0).map(|i| x[i] * x[i]).sum();
        let better = match &best {
            None => true,
            Some((d, s)) => dropped < *d || (dropped == *d && set < *s),
        };
        if better {
            best = Some((dropped, set));
        }
    }
    let set = best.unwrap().1;
    (0..n).map(|i| set.contains(&i)).collect()
}

fn check_patterns(rng: &mut SeedRng, kernels: usize, integer: bool) -> Result<usize, Fail> {
    let lib = random_library(rng);
    let data: Vec<f64> = if integer {
        (0..kernels * 9).map(|_| rng.random_range(-2..=2) as f64).collect()
    } else {
        uniform(rng, kernels * 9, -1.0, 1.0)
    };
    let w = Tensor::new(vec![kernels, 1, 3, 3], data)?;
    let (proj, support) = project_with_support(&w, &ConstraintSet::Pattern(lib.clone()))?;
    for k in 0..kernels {
        let span = k * 9..(k + 1) * 9;
        let (expect, mask) = pattern_oracle(&w.data()[span.clone()], &lib);
        ensure!(
            proj.data()[span.clone()] == expect[..] && support.keep()[span.clone()] == mask[..],
            "kernel {:?}: projection {:?} vs oracle {:?}",
            &w.data()[span.clone()],
            &proj.data()[span],
            expect
        );
    }
    Ok(kernels)
}

pub fn run(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from(0x3a3);

    let mut kernels = 0;
    for _ in 0..10 {
        kernels += check_patterns(&mut rng, 1000, false)?;
    }
    let mut tie_kernels = 0;
    for _ in 0..4 {
        tie_kernels += check_patterns(&mut rng, 500, true)?;
    }

    let mut quant_points = 0;
    for trial in 0..60 {
        let bits = rng.random_range(2..=8);
        // Every fourth trial uses a power-of-two spacing so midpoints are exact ties.
        let reference = if trial % 4 == 0 {
            let top = ((1i64 << (bits - 1)) - 1) as f64;
            Tensor::from_vec(vec![0.25 * top, -0.1])
        } else {
            Tensor::from_vec(uniform(&mut rng, 50, -2.0, 2.0))
        };
        let q = QuantLevels::from_weights(&reference, bits)?;
        let top = q.max_level();
        let mut points = uniform(&mut rng, 2000, -1.3 * reference.max_abs(), 1.3 * reference.max_abs());
        for k in -top..top {
            points.push((k as f64 + 0.5) * q.delta);
            points.push(k as f64 * q.delta);
        }
        points.extend([0.0, -0.0, reference.max_abs(), -reference.max_abs()]);
        let p = Tensor::from_vec(points.clone());
        let (proj, _) = project_with_support(&p, &ConstraintSet::Quant(q))?;
        for (x, y) in points.iter().zip(proj.data()) {
            let expect = quant_oracle(*x, &q);
            ensure!(*y == expect, "{bits}-bit delta {}: {x} projected to {y}, oracle {expect}", q.delta);
        }
        quant_points += points.len();
    }

    let mut vectors = 0;
    for trial in 0..20_000 {
        let n = rng.random_range(1..=9);
        let x: Vec<f64> = if trial % 2 == 0 {
            uniform(&mut rng, n, -1.0, 1.0)
        } else {
            (0..n).map(|_| rng.random_range(-2..=2) as f64).collect()
        };
        let keep = rng.random_range(0..=n);
        let (proj, support) = project_with_support(&Tensor::from_vec(x.clone()), &ConstraintSet::L0Budget { keep })?;
        let mask = l0_oracle(&x, keep);
        let expect: Vec<f64> = x.iter().zip(&mask).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
        ensure!(
            proj.data() == expect.as_slice() && support.keep() == mask.as_slice(),
            "{x:?} keep {keep}: {:?} vs oracle {expect:?}",
            proj.data()
        );
        vectors += 1;
    }

    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "runtime {secs:.1}s exceeds 1 min");
    Ok(format!(
        "{kernels} random + {tie_kernels} tie-heavy kernels, {quant_points} quantized points, {vectors} L0 vectors all exact"
    ))
}

fn sgd(batch_size: usize) -> TrainSettings {
    TrainSettings {
        batch_size,
        optimizer: OptimizerKind::sgd_default(),
    }
}

pub fn pattern_rate_exactness(ctx: &mut Ctx) -> Outcome {
    let mut rng = rng_from(0x225);

    // Any projection onto a 4-of-9 library keeps exactly 4 positions per kernel.
    let mut layers = 0;
    for _ in 0..500 {
        let shape = vec![rng.random_range(1..=16), rng.random_range(1..=8), 3, 3];
        let n = shape.iter().product();
        let w = Tensor::new(shape, uniform(&mut rng, n, -1.0, 1.0))?;
        let (_, support) = project_with_support(&w, &ConstraintSet::Pattern(random_library(&mut rng)))?;
        let r = pattern_rate(&support)?;
        ensure!(r == 2.25, "projected layer reports pattern rate {r}");
        layers += 1;
    }

    // End-to-end on a synthetic conv task.
    let data = gen_gaussian_classes(3, &[1, 28, 28], 8, 0.2, 4)?;
    let net = Network::new(vec![1, 28, 28], small_convnet(3, 4, 8, 3), &mut rng_from(2))?;
    let sets = pattern_sets(&net)?;
    let cfg = AdmmConfig {
        rho: 0.5,
        iterations: 3,
        inner_epochs: 1,
        retrain_epochs: 1,
        train: sgd(8),
        seed: 3,
        ..Default::default()
    };
    let out = admm_run(&net, &data, &data, sets.clone(), &cfg, &mut ())?;
    ensure!(network_feasible(&out.net, &sets)?, "synthetic pattern run ended infeasible");
    let mut reported = Vec::new();
    for (i, r) in out.report.pattern_rates.iter().enumerate() {
        if net.is_conv(i) {
            ensure!(*r == Some(2.25), "synthetic conv layer {i} reports {r:?}");
            reported.push(2.25);
        }
    }

    // The MNIST conv run of criterion 4.
    let mnist = match &ctx.conv_pattern_rates {
        Some(rates) => {
            let conv: Vec<f64> = rates.iter().flatten().copied().collect();
            ensure!(!conv.is_empty() && conv.iter().all(|&r| r == 2.25), "MNIST conv run reports {rates:?}");
            format!("MNIST conv layers {conv:?}")
        }
        None => return Err(Fail("the MNIST conv run of criterion 4 did not complete".into())),
    };
    Ok(format!(
        "{layers} random projected layers at 2.25x, synthetic run {reported:?}, {mnist}"
    ))
}
