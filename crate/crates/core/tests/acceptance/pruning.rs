use std::time::Instant;

use rwprune_core::nn::{evaluate, mean_loss, mlp, Network, OptimizerKind, TrainSettings, Trainer};
use rwprune_core::pipeline::{run_step_at, EpochEvent, PruneStepConfig, ThresholdPolicy};
use rwprune_core::regularizers::{tune_lambda, NetworkRegularizer, PenaltySchedule, RegularizerKind};
use rwprune_core::report::{baseline_static_l1, critical_weight_fraction, magnitude_schedule, MagnitudeConfig};
use rwprune_core::seed::rng_from;
use rwprune_core::tensor::SparsityMask;

use crate::common::{ensure, Chain, Ctx, Fail, Outcome};

const TOLERANCE: f64 = 0.005;
/// Multiple of the tuned λ midpoint used for both the reweighted and static runs.
const LAMBDA_SCALE: f64 = 50.0;
const SEEDS: [u64; 3] = [3, 4, 5];

fn adam(batch_size: usize) -> TrainSettings {
    TrainSettings {
        batch_size,
        optimizer: OptimizerKind::adam_default(),
    }
}

fn step_config(lambda: f64, seed: u64) -> PruneStepConfig {
    PruneStepConfig {
        iterations: 4,
        epochs_per_iteration: 3,
        lambda: Some(lambda),
        threshold: ThresholdPolicy::Absolute { tau: 4e-3 },
        retrain_epochs: 3,
        max_accuracy_drop: TOLERANCE,
        train: TrainSettings {
            batch_size: 32,
            optimizer: OptimizerKind::Sgd { lr: 0.01, momentum: 0.9 },
        },
        retrain: Some(adam(100)),
        seed,
        ..Default::default()
    }
}

/// Checks after every epoch that masks only shrink and masked weights stay zero.
struct Monotone {
    previous: Vec<SparsityMask>,
    epochs: usize,
    violations: Vec<String>,
}

impl Monotone {
    fn observe(&mut self, event: &EpochEvent, net: &Network) {
        self.epochs += 1;
        for (i, prev) in self.previous.iter_mut().enumerate() {
            let mask = net.mask_or_ones(i);
            if !mask.is_refinement_of(prev) {
                self.violations.push(format!("step {} {:?}: layer {i} mask regained weights", event.step, event.phase));
            }
            let data = net.params()[i].weight.data();
            if mask.keep().iter().zip(data).any(|(&k, &w)| !k && w != 0.0) {
                self.violations.push(format!("step {} {:?}: layer {i} masked weight nonzero", event.step, event.phase));
            }
            *prev = mask;
        }
    }
}

fn pretrain(train: &rwprune_core::data::Dataset) -> Result<Network, Fail> {
    let mut net = Network::new(vec![784], mlp(&[300, 100], 784, 10), &mut rng_from(1))?;
    let mut trainer = Trainer::new(&net, adam(100), 2)?;
    for _ in 0..5 {
        trainer.epoch(&mut net, train, &[])?;
    }
    Ok(net)
}

pub fn table(ctx: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let m = ctx.mnist()?;
    let (train, test) = (&m.train, &m.test);
    let pretrained = pretrain(train)?;
    let base = evaluate(&pretrained, test)?;
    ensure!(base >= 0.975, "pretrained accuracy {base:.4} below 0.975");

    let loss = mean_loss(&pretrained, train)?;
    let reg = NetworkRegularizer::new(&pretrained, RegularizerKind::NonStructured, 1.0, 1e-3, PenaltySchedule::Reweighted)?;
    let lambda = LAMBDA_SCALE * tune_lambda(loss, reg.unit_value(&pretrained)?)?.lambda;
    let cfg = step_config(lambda, SEEDS[0]);

    let mut watch = Monotone {
        previous: (0..pretrained.depth()).map(|i| pretrained.mask_or_ones(i)).collect(),
        epochs: 0,
        violations: Vec::new(),
    };
    let mut observer = |e: &EpochEvent, n: &Network| {
        watch.observe(e, n);
        Ok(())
    };
    let kind = RegularizerKind::NonStructured;
    let one = run_step_at(&pretrained, train, test, &cfg, kind, 0, &mut observer)?;
    let mut reports = vec![one.report.clone()];
    let mut current = one.net.clone();
    for step in 1..3 {
        let out = run_step_at(&current, train, test, &cfg, kind, step, &mut observer)?;
        reports.push(out.report.clone());
        current = out.net;
        if out.report.failed {
            break;
        }
    }
    let one_rate = one.report.overall_rate;
    let one_acc = one.report.accuracy_after;
    let last = reports.last().unwrap().clone();
    let three_acc = evaluate(&current, test)?;
    let three_rate = last.overall_rate;

    let targets: Vec<f64> = (2..=12).map(|k| 2f64.powf(k as f64 / 2.0)).collect();
    let mag_cfg = MagnitudeConfig {
        rounds: targets.len(),
        retrain_epochs: 2,
        train: adam(100),
        seed: 1,
    };
    let (_, baseline) = magnitude_schedule(&pretrained, train, test, &targets, &mag_cfg)?;
    let magnitude = baseline.best_rate_within(TOLERANCE);
    let secs = start.elapsed().as_secs_f64();
    ctx.chain = Some(Chain {
        pretrained,
        pretrained_accuracy: base,
        cfg: cfg.clone(),
        one_step: one,
        reports: reports.clone(),
        three_step: current,
        epochs_checked: watch.epochs,
        monotonicity_violations: watch.violations,
    });

    let summary = format!(
        "pretrained {base:.4}; one step {one_rate:.1}x at {one_acc:.4}; three steps {three_rate:.1}x at {three_acc:.4}; magnitude baseline {magnitude:.1}x; lambda {lambda:.3e}"
    );
    ensure!(!reports.iter().any(|r| r.failed), "a step was rolled back: {summary}");
    ensure!(one_rate >= 10.0 && base - one_acc <= TOLERANCE, "one-step target missed: {summary}");
    ensure!(
        reports.len() == 3 && three_rate >= 1.5 * one_rate && base - three_acc <= TOLERANCE,
        "three-step target missed: {summary}"
    );
    ensure!(one_rate > magnitude && three_rate > magnitude, "magnitude baseline not beaten: {summary}");
    ensure!(secs < 90.0 * 60.0, "runtime {secs:.0}s exceeds 90 min: {summary}");
    Ok(summary)
}

pub fn critical(ctx: &mut Ctx) -> Outcome {
    let chain = ctx.chain()?;
    let m = ctx.loaded_mnist()?;
    let net = &chain.pretrained;
    let pre: Vec<_> = net.params().iter().map(|p| p.weight.clone()).collect();
    let loss = mean_loss(net, &m.train)?;
    let abs: f64 = pre.iter().map(|w| w.data().iter().map(|x| x.abs()).sum::<f64>()).sum();
    let static_lambda = LAMBDA_SCALE * tune_lambda(loss, abs)?.lambda;
    let epochs = chain.cfg.iterations * chain.cfg.epochs_per_iteration;

    let mut lines = Vec::new();
    for seed in SEEDS {
        let cfg = PruneStepConfig { seed, ..chain.cfg.clone() };
        let rw = if seed == chain.cfg.seed {
            chain.one_step.clone()
        } else {
            run_step_at(net, &m.train, &m.test, &cfg, RegularizerKind::NonStructured, 0, &mut ())?
        };
        let counts: Vec<usize> = rw.masks.iter().map(SparsityMask::kept).collect();
        let st = baseline_static_l1(
            net,
            &m.train,
            &m.test,
            static_lambda,
            epochs,
            ThresholdPolicy::KeepCount { counts: counts.clone() },
            &cfg,
            &mut (),
        )?;
        let st_counts: Vec<usize> = st.masks.iter().map(SparsityMask::kept).collect();
        ensure!(st_counts == counts, "seed {seed}: sparsity not matched ({st_counts:?} vs {counts:?})");
        let f_rw = critical_weight_fraction(&pre, &rw.regularized, &rw.masks, 0.1)?;
        let f_st = critical_weight_fraction(&pre, &st.regularized, &st.masks, 0.1)?;
        let line = format!(
            "seed {seed}: static {f_st:.4} vs reweighted {f_rw:.4} (acc {:.4} / {:.4})",
            st.report.accuracy_after, rw.report.accuracy_after
        );
        let base = chain.pretrained_accuracy;
        ensure!(
            base - rw.report.accuracy_after <= TOLERANCE && base - st.report.accuracy_after <= TOLERANCE,
            "outside the accuracy tolerance: {line}"
        );
        ensure!(f_st > f_rw, "static run does not exceed the reweighted run: {line}");
        lines.push(line);
    }
    Ok(lines.join("; "))
}
