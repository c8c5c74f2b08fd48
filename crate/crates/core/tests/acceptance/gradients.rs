use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rwprune_core::admm::{all_masks, augmented_loss, AdmmState, ConstraintSet, PatternSet, QuantLevels};
use rwprune_core::nn::{LayerSpec, Network};
use rwprune_core::regularizers::{NetworkRegularizer, PenaltySchedule, RegularizerKind};
use rwprune_core::seed::{rng_from, Rng as SeedRng};

use crate::common::{ensure, norm, uniform, Ctx, Fail, Outcome};

const CASES: usize = 100;
const STEP: f64 = 1e-6;
const TOLERANCE: f64 = 1e-4;
const KINDS: [Option<RegularizerKind>; 5] = [
    None,
    Some(RegularizerKind::NonStructured),
    Some(RegularizerKind::FilterWise),
    Some(RegularizerKind::ShapeWise),
    Some(RegularizerKind::KernelWise),
];

fn random_mlp(rng: &mut SeedRng) -> (Vec<usize>, Vec<LayerSpec>) {
    let input = rng.random_range(3..=12);
    let mut layers = Vec::new();
    let mut width = input;
    for _ in 0..rng.random_range(1..=2) {
        let next = rng.random_range(2..=10);
        layers.push(LayerSpec::Dense { input: width, output: next });
        layers.push(LayerSpec::Relu);
        width = next;
    }
    layers.push(LayerSpec::Dense {
        input: width,
        output: rng.random_range(2..=5),
    });
    (vec![input], layers)
}

fn random_conv(rng: &mut SeedRng) -> (Vec<usize>, Vec<LayerSpec>) {
    'retry: loop {
        let input = vec![rng.random_range(1..=2), rng.random_range(5..=9), rng.random_range(5..=9)];
        let mut shape = input.clone();
        let mut layers = Vec::new();
        for _ in 0..rng.random_range(1..=2) {
            let (kh, kw) = if rng.random_bool(0.5) {
                (3, 3)
            } else {
                (rng.random_range(1..=3), rng.random_range(1..=3))
            };
            let conv = LayerSpec::Conv2d {
                filters: rng.random_range(1..=3),
                channels: shape[0],
                kernel_h: kh,
                kernel_w: kw,
                stride: rng.random_range(1..=2),
                padding: rng.random_range(0..=1),
            };
            let Ok(next) = conv.output_shape(&shape) else { continue 'retry };
            layers.push(conv);
            shape = next;
            if rng.random_bool(0.7) {
                layers.push(LayerSpec::Relu);
            }
            if rng.random_bool(0.4) && shape[1] >= 2 && shape[2] >= 2 {
                layers.push(LayerSpec::MaxPool2x2);
                shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
            }
        }
        layers.push(LayerSpec::Flatten);
        let mut width: usize = shape.iter().product();
        if rng.random_bool(0.5) {
            let hidden = rng.random_range(2..=8);
            layers.push(LayerSpec::Dense { input: width, output: hidden });
            layers.push(LayerSpec::Relu);
            width = hidden;
        }
        layers.push(LayerSpec::Dense {
            input: width,
            output: rng.random_range(2..=4),
        });
        return (input, layers);
    }
}

fn perturb(net: &mut Network, rng: &mut SeedRng, scale: f64) {
    for p in net.params_mut() {
        for x in p.weight.data_mut().iter_mut().chain(p.bias.iter_mut()) {
            *x += rng.random_range(-scale..scale);
        }
    }
}

fn random_sets(net: &Network, rng: &mut SeedRng) -> Result<Vec<ConstraintSet>, Fail> {
    let library = all_masks(9, 4);
    let mut sets = Vec::with_capacity(net.depth());
    for p in net.params() {
        let shape = p.weight.shape();
        let pattern_ok = shape.len() == 4 && shape[2] == 3 && shape[3] == 3;
        let set = match rng.random_range(0..if pattern_ok { 4 } else { 3 }) {
            0 => ConstraintSet::Whole,
            1 => ConstraintSet::L0Budget {
                keep: rng.random_range(0..=p.weight.len()),
            },
            2 => ConstraintSet::Quant(QuantLevels::from_weights(&p.weight, rng.random_range(2..=4))?),
            _ => {
                let picks = sample(rng, library.len(), 8);
                ConstraintSet::Pattern(PatternSet::new([3, 3], picks.iter().map(|i| library[i].clone()).collect())?)
            }
        };
        sets.push(set);
    }
    if sets.iter().all(ConstraintSet::is_trivial) {
        sets[0] = ConstraintSet::L0Budget {
            keep: net.params()[0].weight.len() / 2,
        };
    }
    Ok(sets)
}

/// Which scalar of the network a finite difference perturbs.
#[derive(Clone, Copy)]
enum Coord {
    Weight(usize, usize),
    Bias(usize, usize),
}

fn shifted(net: &Network, c: Coord, delta: f64) -> Network {
    let mut n = net.clone();
    match c {
        Coord::Weight(l, j) => n.params_mut()[l].weight.data_mut()[j] += delta,
        Coord::Bias(l, j) => n.params_mut()[l].bias[j] += delta,
    }
    n
}

pub fn run(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from(0x6ead);
    let (mut worst, mut coords, mut largest) = (0.0f64, 0usize, 0usize);
    let mut constrained = 0;
    for case in 0..CASES {
        let kind = KINDS[case % KINDS.len()];
        let with_admm = (case / KINDS.len()) % 2 == 1;
        let conv = kind.is_some_and(RegularizerKind::is_grouped) || rng.random_bool(0.5);
        let (input, layers) = if conv { random_conv(&mut rng) } else { random_mlp(&mut rng) };
        let mut net = Network::new(input, layers, &mut rng)?;
        largest = largest.max(net.param_count());
        ensure!(net.param_count() <= 10_000, "case {case}: {} parameters", net.param_count());
        perturb(&mut net, &mut rng, 0.1);

        let reg = match kind {
            Some(k) => {
                let lambda = 10f64.powf(rng.random_range(-3.0..-1.0));
                let eps = 10f64.powf(rng.random_range(-3.0..-1.0));
                let mut r = NetworkRegularizer::new(&net, k, lambda, eps, PenaltySchedule::Reweighted)?;
                perturb(&mut net, &mut rng, 0.2);
                r.update(&net)?;
                perturb(&mut net, &mut rng, 0.1);
                Some(r)
            }
            None => None,
        };
        let sets = if with_admm {
            constrained += 1;
            random_sets(&net, &mut rng)?
        } else {
            vec![ConstraintSet::Whole; net.depth()]
        };
        let mut state = AdmmState::new(&net, sets, 10f64.powf(rng.random_range(-2.0..0.5)))?;
        if with_admm {
            for _ in 0..2 {
                perturb(&mut net, &mut rng, 0.1);
                state.z_update(&net)?;
                state.dual_update(&net);
            }
            perturb(&mut net, &mut rng, 0.1);
        }

        let batch = rng.random_range(1..=4);
        let inputs = uniform(&mut rng, batch * net.input_len(), -1.0, 1.0);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..net.classes())).collect();
        let f = |n: &Network| augmented_loss(n, &inputs, &labels, reg.as_ref(), &state).map(|(v, _)| v);
        let (_, grads) = augmented_loss(&net, &inputs, &labels, reg.as_ref(), &state)?;

        let mut picks = Vec::new();
        for (l, p) in net.params().iter().enumerate() {
            let w = p.weight.len();
            picks.extend(sample(&mut rng, w, w.min(40)).iter().map(|j| Coord::Weight(l, j)));
            let b = p.bias.len();
            picks.extend(sample(&mut rng, b, b.min(8)).iter().map(|j| Coord::Bias(l, j)));
        }
        let mut analytic = Vec::with_capacity(picks.len());
        let mut numeric = Vec::with_capacity(picks.len());
        for &c in &picks {
            analytic.push(match c {
                Coord::Weight(l, j) => grads.layers[l].weight.data()[j],
                Coord::Bias(l, j) => grads.layers[l].bias[j],
            });
            let hi = f(&shifted(&net, c, STEP))?;
            let lo = f(&shifted(&net, c, -STEP))?;
            numeric.push((hi - lo) / (2.0 * STEP));
        }
        coords += picks.len();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let err = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
        ensure!(
            err < TOLERANCE,
            "case {case} ({kind:?}, admm {with_admm}, layers {:?}): relative error {err:.3e}",
            net.layers()
        );
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "runtime {secs:.1}s exceeds 2 min");
    Ok(format!(
        "{CASES} configs ({constrained} with ADMM state), {coords} coordinates, largest net {largest} params, worst relative error {worst:.2e}"
    ))
}
