use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rwprune_core::admm::{admm_run, pattern_sets, quant_sets, residual_csv, ConstraintSet};
use rwprune_core::checkpoint::{self, Checkpoint};
use rwprune_core::config::{AdmmTask, BaselineConfig, RunConfig};
use rwprune_core::data::Dataset;
use rwprune_core::nn::{evaluate, mean_loss, Network, Trainer};
use rwprune_core::pipeline::{run_step_at, StepReport};
use rwprune_core::regularizers::{tune_lambda, NetworkRegularizer};
use rwprune_core::report::{
    baseline_magnitude_prune, baseline_static_l1, compression_rates, critical_weight_fraction, layer_counts,
    magnitude_histogram, pruning_rate, rates_csv, step_reports_csv, CompressionModel, LayerBits, MagnitudeConfig,
    RateScope, DENSE_BITS,
};
use rwprune_core::seed::{derive_seed, rng_from};
use rwprune_core::tensor::Tensor;
use rwprune_core::{Error, Result};

use crate::output::{save_checkpoint, write_json, write_text, EpochLog, OutputDirs};
use crate::Failure;

const PRETRAINED: &str = "pretrained.rwp";
const PRUNED: &str = "pruned.rwp";

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), Failure> {
    cfg.data.load(&cfg.model, derive_seed(cfg.seed, "data")).map_err(|e| {
        let mut f = Failure::from(e);
        f.code = 3;
        f
    })
}

fn load_net(path: &Path) -> Result<Network, Failure> {
    checkpoint::load_network(path).map_err(|e| Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    })
}

fn input_path(explicit: &[PathBuf], configured: &Option<PathBuf>, fallback: PathBuf) -> PathBuf {
    explicit.first().cloned().or_else(|| configured.clone()).unwrap_or(fallback)
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let (train, test) = load_data(cfg)?;
    let dirs = OutputDirs::create(cfg)?;
    let input_shape = train.sample_shape().to_vec();
    let layers = cfg.model.layers(&rwprune_core::config::IMAGE_SHAPE);
    let mut net = Network::new(input_shape, layers, &mut rng_from(derive_seed(cfg.seed, "init")))?;
    let mut trainer = Trainer::new(&net, cfg.train.settings(), derive_seed(cfg.seed, "train"))?;
    let mut log = String::from("epoch,mean_loss,test_accuracy\n");
    for _ in 0..cfg.train.epochs {
        let stats = trainer.epoch(&mut net, &train, &[])?;
        let acc = evaluate(&net, &test)?;
        let _ = writeln!(log, "{},{},{acc}", stats.epoch, stats.mean_loss);
        write_text(&dirs.logs.join("train.csv"), &log)?;
        println!("epoch {:>3}  loss {:.5}  test accuracy {acc:.4}", stats.epoch, stats.mean_loss);
    }
    let accuracy = evaluate(&net, &test)?;
    let loss = mean_loss(&net, &train)?;
    let path = dirs.checkpoints.join(PRETRAINED);
    save_checkpoint(&path, &net, cfg, &[("accuracy", accuracy), ("loss", loss)])?;
    println!("accuracy {accuracy:.4}");
    println!("loss {loss:.6}");
    println!("checkpoint {}", path.display());
    Ok(())
}

fn print_lambda_band(net: &Network, train: &Dataset, cfg: &RunConfig) -> Result<()> {
    let step = &cfg.prune.step;
    let reg = NetworkRegularizer::new(net, cfg.prune.kind, 1.0, step.epsilon, step.schedule)?;
    let loss = mean_loss(net, train)?;
    let choice = tune_lambda(loss, reg.unit_value(net)?)?;
    println!(
        "lambda {:.6e}  band [{:.6e}, {:.6e}]  (loss {loss:.6})",
        choice.lambda, choice.lower, choice.upper
    );
    Ok(())
}

fn write_step_reports(dirs: &OutputDirs, reports: &[StepReport]) -> Result<()> {
    write_text(&dirs.reports.join("steps.csv"), &step_reports_csv(reports))?;
    write_json(&dirs.reports.join("steps.json"), &reports)
}

/// `steps = Some(1)` for `prune`; `None` takes the configured chain length.
pub fn prune(cfg: &RunConfig, explicit: &[PathBuf], steps: Option<usize>, lambda_auto: bool) -> Result<(), Failure> {
    let input = input_path(explicit, &cfg.prune.input, cfg.checkpoints_dir().join(PRETRAINED));
    let net = load_net(&input)?;
    if cfg.prune.kind.is_grouped() && !net.has_conv() {
        return Err(Failure::config("group kind requires conv layers"));
    }
    let (train, test) = load_data(cfg)?;
    let dirs = OutputDirs::create(cfg)?;
    if lambda_auto {
        print_lambda_band(&net, &train, cfg)?;
    }
    let mut step_cfg = cfg.prune.step.clone();
    step_cfg.seed = derive_seed(cfg.seed, "prune");

    if let Some(baseline) = &cfg.prune.baseline {
        return run_baseline(cfg, baseline, &net, &train, &test, &step_cfg, &dirs);
    }

    let mut log = EpochLog::new(dirs.logs.join("prune_epochs.csv"))?;
    let mut current = net;
    let mut reports = Vec::new();
    for step in 0..steps.unwrap_or(cfg.prune.steps) {
        let out = run_step_at(&current, &train, &test, &step_cfg, cfg.prune.kind, step, &mut log)?;
        let report = out.report.clone();
        println!(
            "step {step}: lambda {:.4e}  rate {:.2}x  accuracy {:.4} -> {:.4}{}",
            report.lambda,
            report.overall_rate,
            report.accuracy_before,
            report.accuracy_after,
            if report.failed { "  (rolled back)" } else { "" }
        );
        reports.push(report);
        write_step_reports(&dirs, &reports)?;
        if out.report.failed {
            save_checkpoint(&dirs.checkpoints.join(PRUNED), &current, cfg, &[])?;
            return Err(Failure::step(format!(
                "step {step} lost {:.4} accuracy (limit {}); kept the step {} model",
                out.report.accuracy_before - out.report.accuracy_after,
                step_cfg.max_accuracy_drop,
                step as i64 - 1
            )));
        }
        let regularized = Network::from_params(
            out.net.input_shape().to_vec(),
            out.net.layers().to_vec(),
            out.net
                .params()
                .iter()
                .zip(&out.regularized)
                .map(|(p, w)| rwprune_core::nn::Param {
                    weight: w.clone(),
                    bias: p.bias.clone(),
                })
                .collect(),
        )?;
        save_checkpoint(&dirs.checkpoints.join(format!("regularized_step{step}.rwp")), &regularized, cfg, &[])?;
        let metrics = [
            ("accuracy", out.report.accuracy_after),
            ("rate", out.report.overall_rate),
            ("lambda", out.report.lambda),
        ];
        save_checkpoint(&dirs.checkpoints.join(format!("step{step}.rwp")), &out.net, cfg, &metrics)?;
        save_checkpoint(&dirs.checkpoints.join(PRUNED), &out.net, cfg, &metrics)?;
        current = out.net;
    }
    write_text(&dirs.reports.join("rates.csv"), &rates_csv(&layer_counts(&current)))?;
    Ok(())
}

fn run_baseline(
    cfg: &RunConfig,
    baseline: &BaselineConfig,
    net: &Network,
    train: &Dataset,
    test: &Dataset,
    step_cfg: &rwprune_core::pipeline::PruneStepConfig,
    dirs: &OutputDirs,
) -> Result<(), Failure> {
    let (pruned, accuracy) = match *baseline {
        BaselineConfig::Magnitude {
            target,
            rounds,
            retrain_epochs,
        } => {
            let mcfg = MagnitudeConfig {
                rounds,
                retrain_epochs,
                train: step_cfg.retrain.unwrap_or(step_cfg.train),
                seed: derive_seed(cfg.seed, "magnitude"),
            };
            let (pruned, report) = baseline_magnitude_prune(net, train, test, target, &mcfg)?;
            write_json(&dirs.reports.join("baseline.json"), &report)?;
            for r in &report.rounds {
                println!("magnitude target {:.2}x: rate {:.2}x accuracy {:.4}", r.target, r.rate, r.accuracy);
            }
            let acc = report.rounds.last().map_or(report.accuracy_before, |r| r.accuracy);
            (pruned, acc)
        }
        BaselineConfig::StaticL1 { lambda, epochs } => {
            let mut log = EpochLog::new(dirs.logs.join("baseline_epochs.csv"))?;
            let out = baseline_static_l1(net, train, test, lambda, epochs, step_cfg.threshold.clone(), step_cfg, &mut log)?;
            write_step_reports(dirs, std::slice::from_ref(&out.report))?;
            println!(
                "static l1: rate {:.2}x accuracy {:.4}",
                out.report.overall_rate, out.report.accuracy_after
            );
            (out.net, out.report.accuracy_after)
        }
    };
    save_checkpoint(&dirs.checkpoints.join("baseline.rwp"), &pruned, cfg, &[("accuracy", accuracy)])?;
    write_text(&dirs.reports.join("baseline_rates.csv"), &rates_csv(&layer_counts(&pruned)))?;
    Ok(())
}

fn bits_model(net: &Network, bits: &[u32], index_bits: u32) -> CompressionModel {
    CompressionModel {
        layers: layer_counts(net)
            .iter()
            .zip(bits)
            .map(|(c, &b)| LayerBits {
                bits: b,
                nonzero: c.nonzero as u64,
                total: c.total as u64,
            })
            .collect(),
        index_bits,
    }
}

pub fn admm(cfg: &RunConfig, explicit: &[PathBuf]) -> Result<(), Failure> {
    cfg.validate_admm().map_err(|e| Failure::config(e.to_string()))?;
    let default = match cfg.admm.task {
        AdmmTask::PatternKernel => PRETRAINED,
        AdmmTask::PruneQuant => PRUNED,
    };
    let input = input_path(explicit, &cfg.admm.input, cfg.checkpoints_dir().join(default));
    let net = load_net(&input)?;
    let sets = match cfg.admm.task {
        AdmmTask::PatternKernel => pattern_sets(&net),
        AdmmTask::PruneQuant => quant_sets(&net, cfg.admm.conv_bits, cfg.admm.fc_bits),
    }
    .map_err(|e| Failure::config(e.to_string()))?;
    let (train, test) = load_data(cfg)?;
    let dirs = OutputDirs::create(cfg)?;
    let mut run = cfg.admm.run.clone();
    run.seed = derive_seed(cfg.seed, "admm");
    let mut log = EpochLog::new(dirs.logs.join("admm_epochs.csv"))?;
    let out = admm_run(&net, &train, &test, sets.clone(), &run, &mut log)?;
    write_text(&dirs.logs.join("admm_residual.csv"), &residual_csv(&out.report.iterations))?;
    write_json(&dirs.reports.join("admm.json"), &out.report)?;

    let names = out.net.layer_names();
    let bits: Vec<u32> = sets
        .iter()
        .map(|s| match s {
            ConstraintSet::Quant(q) => q.bits,
            _ => DENSE_BITS,
        })
        .collect();
    let mut metrics: Vec<(String, f64)> = vec![
        ("accuracy".into(), out.report.accuracy_after),
        ("rate".into(), out.report.overall_rate),
    ];
    for (name, &b) in names.iter().zip(&bits) {
        metrics.push((format!("bits.{name}"), b as f64));
    }
    for (name, r) in names.iter().zip(&out.report.pattern_rates) {
        if let Some(r) = r {
            println!("{name}: pattern rate {r:.2}x");
            metrics.push((format!("pattern_rate.{name}"), *r));
        }
    }
    let rates = compression_rates(&bits_model(&out.net, &bits, cfg.admm.index_bits))?;
    let mut csv = String::from("pruning_rate,data_rate,model_rate\n");
    let _ = writeln!(csv, "{},{},{}", out.report.overall_rate, rates.data_rate, rates.model_rate);
    write_text(&dirs.reports.join("compression.csv"), &csv)?;
    println!(
        "converged {}  rate {:.2}x  data rate {:.2}x  model rate {:.2}x  accuracy {:.4} -> {:.4}",
        out.report.converged,
        out.report.overall_rate,
        rates.data_rate,
        rates.model_rate,
        out.report.accuracy_before,
        out.report.accuracy_after
    );
    let metrics: Vec<(&str, f64)> = metrics.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    save_checkpoint(&dirs.checkpoints.join("admm.rwp"), &out.net, cfg, &metrics)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    checkpoint::load(path, None).map_err(|e| Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    })
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned())
}

fn weights(net: &Network) -> Vec<Tensor> {
    net.params().iter().map(|p| p.weight.clone()).collect()
}

pub fn report(cfg: &RunConfig, explicit: &[PathBuf]) -> Result<(), Failure> {
    let paths: Vec<PathBuf> = if explicit.is_empty() {
        cfg.report.checkpoints.clone()
    } else {
        explicit.to_vec()
    };
    if paths.is_empty() || paths.len() > 2 {
        return Err(Failure::config("report takes one or two checkpoints"));
    }
    let dirs = OutputDirs::create(cfg)?;
    let mut nets = Vec::new();
    for path in &paths {
        let ckpt = read_checkpoint(path)?;
        let net = ckpt.to_network().map_err(|e| Failure {
            code: 3,
            message: format!("{}: {e}", path.display()),
        })?;
        let name = stem(path);
        let counts = layer_counts(&net);
        write_text(&dirs.reports.join(format!("rates_{name}.csv")), &rates_csv(&counts))?;
        for (layer, p) in net.layer_names().iter().zip(net.params()) {
            let h = magnitude_histogram(p.weight.data(), cfg.report.bin_width)?;
            write_text(&dirs.reports.join(format!("histogram_{name}_{layer}.csv")), &h.to_csv())?;
        }
        let bits: Vec<u32> = net
            .layer_names()
            .iter()
            .map(|l| {
                ckpt.metadata
                    .metrics
                    .get(&format!("bits.{l}"))
                    .map_or(DENSE_BITS, |&b| b as u32)
            })
            .collect();
        let overall = pruning_rate(&counts, RateScope::Overall)?;
        let rates = compression_rates(&bits_model(&net, &bits, cfg.admm.index_bits))?;
        let mut csv = String::from("pruning_rate,conv_rate,data_rate,model_rate\n");
        let conv = if net.has_conv() {
            pruning_rate(&counts, RateScope::ConvOnly)?.to_string()
        } else {
            String::new()
        };
        let _ = writeln!(csv, "{overall},{conv},{},{}", rates.data_rate, rates.model_rate);
        write_text(&dirs.reports.join(format!("compression_{name}.csv")), &csv)?;
        println!(
            "{name}: rate {overall:.2}x  data rate {:.2}x  model rate {:.2}x",
            rates.data_rate, rates.model_rate
        );
        nets.push((name, net));
    }
    if let [(name_a, a), (name_b, b)] = nets.as_slice() {
        let (ca, cb) = (layer_counts(a), layer_counts(b));
        if ca.len() != cb.len() || ca.iter().zip(&cb).any(|(x, y)| x.total != y.total) {
            return Err(Failure::config("compared checkpoints have different architectures"));
        }
        let mut csv = format!("layer,total,nonzero_{name_a},rate_{name_a},nonzero_{name_b},rate_{name_b}\n");
        for (x, y) in ca.iter().zip(&cb) {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                x.name,
                x.total,
                x.nonzero,
                x.total as f64 / x.nonzero as f64,
                y.nonzero,
                y.total as f64 / y.nonzero as f64
            );
        }
        write_text(&dirs.reports.join("comparison.csv"), &csv)?;
        if let (Some(pre), [reg_a, reg_b]) = (&cfg.report.pretrained, cfg.report.regularized.as_slice()) {
            let pre = weights(&load_net(pre)?);
            let mut csv = String::from("checkpoint,critical_fraction\n");
            for ((name, net), reg) in nets.iter().zip([reg_a, reg_b]) {
                let reg = weights(&load_net(reg)?);
                let survivors: Vec<_> = (0..net.depth()).map(|i| net.mask_or_ones(i)).collect();
                let f = critical_weight_fraction(&pre, &reg, &survivors, cfg.report.critical_quantile)?;
                let _ = writeln!(csv, "{name},{f}");
                println!("{name}: critical-weight fraction {f:.4}");
            }
            write_text(&dirs.reports.join("critical.csv"), &csv)?;
        }
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, explicit: &[PathBuf]) -> Result<(), Failure> {
    let path = match explicit.first() {
        Some(p) => p.clone(),
        None => {
            let pruned = cfg.checkpoints_dir().join(PRUNED);
            if pruned.exists() {
                pruned
            } else {
                cfg.checkpoints_dir().join(PRETRAINED)
            }
        }
    };
    let net = load_net(&path)?;
    let (train, test) = load_data(cfg)?;
    let check = |e: Error| Failure {
        code: 3,
        message: format!("{} does not fit the configured data: {e}", path.display()),
    };
    let accuracy = evaluate(&net, &test).map_err(check)?;
    let loss = mean_loss(&net, &train).map_err(check)?;
    let rate = pruning_rate(&layer_counts(&net), RateScope::Overall)?;
    println!("accuracy {accuracy:.4}");
    println!("loss {loss:.6}");
    println!("rate {rate:.2}x");
    Ok(())
}
