use rand::Rng;
use rwprune_core::admm::{
    admm_run, network_feasible, pattern_sets, AdmmConfig, AdmmRegularizer, AdmmState, ConstraintSet, PatternSet,
    QuantLevels,
};
use rwprune_core::data::{gen_gaussian_classes, load_mnist, Dataset};
use rwprune_core::nn::{evaluate, mlp, small_convnet, Network, OptimizerKind, TrainSettings, Trainer};
use rwprune_core::pipeline::{effective_masks, run_reweighted_step, PruneStepConfig, ThresholdPolicy};
use rwprune_core::regularizers::{PenaltySchedule, RegularizerKind};
use rwprune_core::seed::rng_from;

use crate::common::{ensure, mnist_dir, Ctx, Fail, Outcome};

fn sgd(batch_size: usize, lr: f64) -> TrainSettings {
    TrainSettings {
        batch_size,
        optimizer: OptimizerKind::Sgd { lr, momentum: 0.9 },
    }
}

/// `admm_run` over whole-space sets against the plain pipeline, same seed.
fn whole_space_matches(net: &Network, data: &Dataset, kind: RegularizerKind) -> Result<(), Fail> {
    let step = PruneStepConfig {
        iterations: 3,
        epochs_per_iteration: 2,
        retrain_epochs: 2,
        threshold: ThresholdPolicy::RelativeToMax { ratio: 0.1 },
        max_accuracy_drop: 1.0,
        train: sgd(8, 0.01),
        seed: 17,
        ..Default::default()
    };
    let pipe = run_reweighted_step(net, data, data, &step, kind, &mut ())?;
    let cfg = AdmmConfig {
        iterations: step.iterations,
        inner_epochs: step.epochs_per_iteration,
        retrain_epochs: step.retrain_epochs,
        regularizer: Some(AdmmRegularizer {
            kind,
            lambda: None,
            epsilon: step.epsilon,
            schedule: PenaltySchedule::Reweighted,
            threshold: Some(step.threshold.clone()),
        }),
        train: step.train,
        seed: step.seed,
        ..Default::default()
    };
    let out = admm_run(net, data, data, vec![ConstraintSet::Whole; net.depth()], &cfg, &mut ())?;
    ensure!(out.net.params() == pipe.net.params(), "{kind}: weights differ from the pipeline");
    ensure!(effective_masks(&out.net) == pipe.masks, "{kind}: masks differ from the pipeline");
    ensure!(out.report.lambda == Some(pipe.report.lambda), "{kind}: lambda differs");
    ensure!(!out.state.is_constrained(), "{kind}: whole-space run carries split variables");
    Ok(())
}

fn dual_updates_exact() -> Result<usize, Fail> {
    let mut net = Network::new(vec![1, 28, 28], small_convnet(3, 4, 8, 3), &mut rng_from(2))?;
    let sets = vec![
        ConstraintSet::Pattern(PatternSet::new([3, 3], rwprune_core::admm::all_masks(9, 4)[..8].to_vec())?),
        ConstraintSet::L0Budget { keep: 40 },
        ConstraintSet::Quant(QuantLevels::from_weights(&net.params()[2].weight, 3)?),
        ConstraintSet::Whole,
    ];
    ensure!(sets.len() == net.depth(), "unexpected depth {}", net.depth());
    let mut state = AdmmState::new(&net, sets, 0.3)?;
    let mut rng = rng_from(8);
    let mut compared = 0;
    for _ in 0..5 {
        for p in net.params_mut() {
            for x in p.weight.data_mut() {
                *x += 0.05 * rng.random_range(-1.0..1.0);
            }
        }
        state.z_update(&net)?;
        let before: Vec<_> = (0..net.depth()).map(|i| state.vars(i).map(|v| v.u.clone())).collect();
        state.dual_update(&net);
        for (i, prev) in before.iter().enumerate() {
            let (Some(v), Some(u0)) = (state.vars(i), prev) else { continue };
            for (((u, a), w), z) in v.u.data().iter().zip(u0.data()).zip(net.params()[i].weight.data()).zip(v.z.data()) {
                ensure!(u.to_bits() == (a + w - z).to_bits(), "layer {i}: U = {u}, expected {}", a + w - z);
                compared += 1;
            }
        }
    }
    Ok(compared)
}

pub fn run(ctx: &mut Ctx) -> Outcome {
    let data = gen_gaussian_classes(3, &[10], 20, 0.1, 6)?;
    let net = Network::new(vec![10], mlp(&[8], 10, 3), &mut rng_from(4))?;
    whole_space_matches(&net, &data, RegularizerKind::NonStructured)?;
    let images = gen_gaussian_classes(3, &[1, 28, 28], 8, 0.2, 4)?;
    let conv = Network::new(vec![1, 28, 28], small_convnet(3, 4, 8, 3), &mut rng_from(2))?;
    whole_space_matches(&conv, &images, RegularizerKind::KernelWise)?;
    let compared = dual_updates_exact()?;

    let dir = mnist_dir();
    let m = load_mnist(&dir).map_err(|e| Fail(format!("MNIST unavailable ({e}); fetch it into {}", dir.display())))?;
    let train = m.train.head(10_000).reshaped(vec![1, 28, 28])?;
    let test = m.test.head(2000).reshaped(vec![1, 28, 28])?;
    let mut net = Network::new(vec![1, 28, 28], small_convnet(8, 16, 64, 10), &mut rng_from(1))?;
    let settings = TrainSettings {
        batch_size: 50,
        optimizer: OptimizerKind::adam_default(),
    };
    let mut trainer = Trainer::new(&net, settings, 2)?;
    for _ in 0..2 {
        trainer.epoch(&mut net, &train, &[])?;
    }
    let base = evaluate(&net, &test)?;
    let sets = pattern_sets(&net)?;
    let cfg = AdmmConfig {
        rho: 1.0,
        iterations: 12,
        inner_epochs: 1,
        tolerance: 1e-2,
        retrain_epochs: 2,
        train: sgd(50, 1e-3),
        retrain: Some(settings),
        ..Default::default()
    };
    let out = admm_run(&net, &train, &test, sets.clone(), &cfg, &mut ())?;
    ctx.conv_pattern_rates = Some(out.report.pattern_rates.clone());
    let residuals: Vec<f64> = out.report.iterations.iter().filter_map(|it| it.primal_residual).collect();
    let hit = residuals.iter().position(|&r| r < 1e-2);
    ensure!(
        hit.is_some_and(|k| k < 12),
        "MNIST conv residuals never fell below 1e-2 in 12 iterations: {residuals:?}"
    );
    ensure!(network_feasible(&out.net, &sets)?, "finalized MNIST conv model is not feasible");
    Ok(format!(
        "whole-space runs equal the pipeline (dense and kernel-wise), {compared} dual entries bit-exact, MNIST conv residual {:.2e} at iteration {}, feasible, accuracy {base:.4} -> {:.4}",
        residuals[hit.unwrap()],
        hit.unwrap() + 1,
        out.report.accuracy_after
    ))
}
