use rwprune_core::checkpoint::{decode, encode, Checkpoint, Dtype};
use rwprune_core::data::{gen_gaussian_classes, Dataset};
use rwprune_core::nn::{evaluate, small_convnet, Network, OptimizerKind, TrainSettings, Trainer};
use rwprune_core::pipeline::{run_multistep, PruneStepConfig, ThresholdPolicy};
use rwprune_core::regularizers::RegularizerKind;
use rwprune_core::seed::{derive_seed, rng_from};

use crate::common::{ensure, Ctx, Fail, Outcome};

/// Encode, decode and compare weights, masks, logits and accuracy bit for bit.
fn round_trip(net: &Network, data: &Dataset) -> Result<usize, Fail> {
    let ckpt = Checkpoint::from_network(net, Dtype::F64, Some(serde_json::json!({ "seed": 1 })));
    let bytes = encode(&ckpt)?;
    let back = decode(&bytes)?;
    ensure!(back == ckpt, "decoded checkpoint differs from the encoded one");
    let restored = back.to_network()?;
    ensure!(restored.params() == net.params(), "weights changed in the round trip");
    ensure!(restored.masks() == net.masks(), "masks changed in the round trip");
    let n = data.len().min(500);
    let a = net.logits(&data.inputs()[..n * data.sample_len()], n)?;
    let b = restored.logits(&data.inputs()[..n * data.sample_len()], n)?;
    ensure!(
        a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
        "logits differ after the round trip"
    );
    ensure!(
        evaluate(net, data)?.to_bits() == evaluate(&restored, data)?.to_bits(),
        "accuracy differs after the round trip"
    );
    Ok(bytes.len())
}

/// Train and prune a small conv net from nothing but `seed`; return the checkpoint bytes.
fn seeded_run(seed: u64) -> Result<Vec<u8>, Fail> {
    let data = gen_gaussian_classes(3, &[1, 28, 28], 12, 0.2, derive_seed(seed, "data"))?;
    let mut net = Network::new(
        vec![1, 28, 28],
        small_convnet(3, 4, 8, 3),
        &mut rng_from(derive_seed(seed, "init")),
    )?;
    let settings = TrainSettings {
        batch_size: 8,
        optimizer: OptimizerKind::adam_default(),
    };
    let mut trainer = Trainer::new(&net, settings, derive_seed(seed, "train"))?;
    for _ in 0..2 {
        trainer.epoch(&mut net, &data, &[])?;
    }
    let cfg = PruneStepConfig {
        iterations: 2,
        epochs_per_iteration: 1,
        threshold: ThresholdPolicy::RelativeToMax { ratio: 0.2 },
        retrain_epochs: 1,
        max_accuracy_drop: 1.0,
        train: settings,
        seed: derive_seed(seed, "prune"),
        ..Default::default()
    };
    let out = run_multistep(&net, &data, &data, &cfg, RegularizerKind::KernelWise, 2, &mut ())?;
    Ok(encode(&Checkpoint::from_network(&out.net, Dtype::F64, None))?)
}

pub fn run(ctx: &mut Ctx) -> Outcome {
    let first = seeded_run(11)?;
    let second = seeded_run(11)?;
    ensure!(first == second, "two runs with seed 11 wrote different checkpoints");
    ensure!(seeded_run(12)? != first, "a different seed reproduced the same checkpoint");
    let data = gen_gaussian_classes(3, &[1, 28, 28], 12, 0.2, 5)?;
    let small = Checkpoint::from_network(&decode(&first)?.to_network()?, Dtype::F64, None).to_network()?;
    round_trip(&small, &data)?;

    let chain = ctx.chain()?;
    ensure!(
        chain.monotonicity_violations.is_empty(),
        "mask monotonicity violated: {:?}",
        &chain.monotonicity_violations[..chain.monotonicity_violations.len().min(5)]
    );
    let expected = chain.reports.len() * chain.cfg.epoch_budget();
    ensure!(
        chain.epochs_checked == expected && chain.reports.len() == 3,
        "monotonicity checked on {} epochs over {} steps, expected {expected}",
        chain.epochs_checked,
        chain.reports.len()
    );
    let test = &ctx.loaded_mnist()?.test;
    let bytes = round_trip(&chain.three_step, test)?;
    Ok(format!(
        "identical checkpoints from repeated seeded runs; MNIST {}-step model round-trips bit-exact ({bytes} bytes); masks monotone over {} epochs",
        chain.reports.len(),
        chain.epochs_checked
    ))
}
