//! `rwprune`: train, prune, compress and report on small networks from a TOML config.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
//! 4 pruning step rolled back by the accuracy guard, 5 ADMM divergence.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rwprune_core::config::{AdmmTask, RunConfig};
use rwprune_core::regularizers::RegularizerKind;
use rwprune_core::Error;

#[derive(Parser, Debug)]
#[command(name = "rwprune", version, about = "Reweighted-regularization pruning and ADMM compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the baseline model and write checkpoints/pretrained.rwp.
    Train(Common),
    /// One reweighted pruning step (or the configured baseline).
    Prune(Common),
    /// A chain of reweighted pruning steps.
    PruneMultistep(Common),
    /// ADMM run for the pattern-kernel or prune-quant task.
    Admm(Common),
    /// Rate, compression and histogram tables for one or two checkpoints.
    Report(Common),
    /// Test accuracy and training loss of a checkpoint.
    Eval(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Input checkpoint; repeat for `report`.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, conflicts_with = "lambda_auto")]
    lambda: Option<f64>,
    /// Tune λ from the input model and print the admissible band.
    #[arg(long)]
    lambda_auto: bool,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    conv_bits: Option<u32>,
    #[arg(long)]
    fc_bits: Option<u32>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Nonstructured,
    Filter,
    Shape,
    Kernel,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    PatternKernel,
    PruneQuant,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn step(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Divergence(_) => 5,
            Error::Shape(_) | Error::EmptyDataset | Error::Idx(_) | Error::Checkpoint(_) | Error::Io { .. } => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn load_config(args: &Common) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", args.config.display())))?;
    let mut cfg = RunConfig::parse(&text).map_err(|e| Failure::config(e.to_string()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(kind) = args.kind {
        cfg.prune.kind = match kind {
            KindArg::Nonstructured => RegularizerKind::NonStructured,
            KindArg::Filter => RegularizerKind::FilterWise,
            KindArg::Shape => RegularizerKind::ShapeWise,
            KindArg::Kernel => RegularizerKind::KernelWise,
        };
    }
    if let Some(steps) = args.steps {
        cfg.prune.steps = steps;
    }
    if let Some(lambda) = args.lambda {
        cfg.prune.step.lambda = Some(lambda);
    }
    if args.lambda_auto {
        cfg.prune.step.lambda = None;
    }
    if let Some(task) = args.task {
        cfg.admm.task = match task {
            TaskArg::PatternKernel => AdmmTask::PatternKernel,
            TaskArg::PruneQuant => AdmmTask::PruneQuant,
        };
    }
    if let Some(bits) = args.conv_bits {
        cfg.admm.conv_bits = bits;
    }
    if let Some(bits) = args.fc_bits {
        cfg.admm.fc_bits = bits;
    }
    if let Some(rho) = args.rho {
        cfg.admm.run.rho = rho;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.validate().map_err(|e| Failure::config(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => commands::train(&load_config(&a)?),
        Command::Prune(a) => commands::prune(&load_config(&a)?, &a.checkpoint, Some(1), a.lambda_auto),
        Command::PruneMultistep(a) => commands::prune(&load_config(&a)?, &a.checkpoint, None, a.lambda_auto),
        Command::Admm(a) => commands::admm(&load_config(&a)?, &a.checkpoint),
        Command::Report(a) => commands::report(&load_config(&a)?, &a.checkpoint),
        Command::Eval(a) => commands::eval(&load_config(&a)?, &a.checkpoint),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
