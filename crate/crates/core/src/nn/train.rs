use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::{argmax, Gradients, Network};
use super::optim::{OptimizerKind, OptimizerState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed::{rng_from, Rng};

/// Extra differentiable term added to the data loss during training
/// (regularizers, ADMM proximal terms).
pub trait Objective {
    fn value(&self, net: &Network) -> Result<f64>;
    fn add_gradient(&self, net: &Network, grads: &mut Gradients) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 64,
            optimizer: OptimizerKind::adam_default(),
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Epochs completed by this trainer, including this one.
    pub epoch: usize,
    /// Mean data loss over the epoch's mini-batches (extra terms excluded).
    pub mean_loss: f64,
}

/// Mini-batch training loop with a fixed shuffle stream. Single writer.
pub struct Trainer {
    rng: Rng,
    optimizer: OptimizerState,
    batch_size: usize,
    frozen: Vec<bool>,
    epochs: usize,
}

impl Trainer {
    pub fn new(net: &Network, settings: TrainSettings, seed: u64) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            rng: rng_from(seed),
            optimizer: OptimizerState::new(settings.optimizer, net),
            batch_size: settings.batch_size,
            frozen: vec![false; net.depth()],
            epochs: 0,
        })
    }

    /// Keep the weights of the flagged layers fixed (biases still train).
    pub fn freeze(&mut self, frozen: Vec<bool>) {
        self.frozen = frozen;
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs
    }

    pub fn epoch(&mut self, net: &mut Network, data: &Dataset, extra: &[&dyn Objective]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if data.sample_len() != net.input_len() {
            return Err(Error::shape(format!(
                "dataset samples {:?} do not fit network input {:?}",
                data.sample_shape(),
                net.input_shape()
            )));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut inputs, mut labels) = (Vec::new(), Vec::new());
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.batch_size) {
            data.gather(chunk, &mut inputs, &mut labels);
            let (loss, mut grads) = net.loss_and_gradients(&inputs, &labels)?;
            for term in extra {
                term.add_gradient(net, &mut grads)?;
            }
            self.optimizer.step(net, &mut grads, &self.frozen)?;
            total += loss;
            batches += 1;
        }
        self.epochs += 1;
        let mean_loss = total / batches as f64;
        if !mean_loss.is_finite() || !net.params().iter().all(|p| p.weight.all_finite()) {
            return Err(Error::invalid("training diverged to non-finite values"));
        }
        Ok(EpochStats {
            epoch: self.epochs,
            mean_loss,
        })
    }
}

const EVAL_BATCH: usize = 1000;

/// Fraction of samples whose argmax prediction matches the label.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = net.classes();
    let mut correct = 0usize;
    let s = data.sample_len();
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let logits = net.logits(&data.inputs()[start * s..end * s], end - start)?;
        correct += logits
            .chunks_exact(classes)
            .zip(&data.labels()[start..end])
            .filter(|(row, &label)| argmax(row) == label)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean cross-entropy over a whole dataset.
pub fn mean_loss(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let s = data.sample_len();
    let mut total = 0.0;
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let (loss, _) = net.forward_loss(&data.inputs()[start * s..end * s], &data.labels()[start..end])?;
        total += loss * (end - start) as f64;
    }
    Ok(total / data.len() as f64)
}
