use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rwprune_core::checkpoint::{self, Checkpoint, Dtype};
use rwprune_core::config::RunConfig;
use rwprune_core::nn::Network;
use rwprune_core::pipeline::{EpochEvent, Observer, Phase};
use rwprune_core::{Error, Result};

/// The `checkpoints/`, `reports/` and `logs/` tree under the output directory.
pub struct OutputDirs {
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    pub logs: PathBuf,
}

impl OutputDirs {
    pub fn create(cfg: &RunConfig) -> Result<Self> {
        let dirs = Self {
            checkpoints: cfg.checkpoints_dir(),
            reports: cfg.reports_dir(),
            logs: cfg.logs_dir(),
        };
        for d in [&dirs.checkpoints, &dirs.reports, &dirs.logs] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(dirs)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value).expect("report serializes"))
}

/// Save `net` with the run's config snapshot and the given metrics.
pub fn save_checkpoint(path: &Path, net: &Network, cfg: &RunConfig, metrics: &[(&str, f64)]) -> Result<()> {
    let snapshot = serde_json::to_value(cfg).expect("config serializes");
    let mut ckpt = Checkpoint::from_network(net, Dtype::F64, Some(snapshot));
    for (k, v) in metrics {
        ckpt = ckpt.with_metric(k, *v);
    }
    checkpoint::save(path, &ckpt)
}

/// Collects one CSV row per training epoch and flushes it to disk as it goes.
pub struct EpochLog {
    path: PathBuf,
    text: String,
}

impl EpochLog {
    pub fn new(path: PathBuf) -> Result<Self> {
        let text = String::from("step,phase,iteration,epoch,mean_loss\n");
        write_text(&path, &text)?;
        Ok(Self { path, text })
    }
}

impl Observer for EpochLog {
    fn on_epoch(&mut self, event: &EpochEvent, _net: &Network) -> Result<()> {
        let (phase, iteration) = match event.phase {
            Phase::Regularize { iteration } => ("regularize", iteration),
            Phase::Retrain => ("retrain", 0),
            Phase::Admm { iteration } => ("admm", iteration),
        };
        let _ = writeln!(
            self.text,
            "{},{phase},{iteration},{},{}",
            event.step, event.stats.epoch, event.stats.mean_loss
        );
        write_text(&self.path, &self.text)
    }
}
