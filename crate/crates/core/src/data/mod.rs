//! Datasets: MNIST IDX ingestion and seeded synthetic generators.

mod idx;
mod synth;

pub use idx::{decode_idx_images, decode_idx_labels, load_mnist, load_mnist_split, IdxImages, Mnist};
pub use synth::{gen_gaussian_classes, gen_sparse_regression, SparseRegression};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

/// Inputs in `[0, 1]` stored row-major as `[N, sample_shape...]`, plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    sample_shape: Vec<usize>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        sample_shape: Vec<usize>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let sample_len: usize = sample_shape.iter().product();
        if sample_len == 0 || inputs.len() != labels.len() * sample_len {
            return Err(Error::shape(format!(
                "{} inputs for {} samples of shape {sample_shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
        }
        if inputs.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::invalid("inputs must lie in [0, 1]"));
        }
        Ok(Self {
            inputs,
            sample_shape,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.inputs[i * s..(i + 1) * s]
    }

    /// View the same samples with a different per-sample shape of equal size.
    pub fn reshaped(mut self, sample_shape: Vec<usize>) -> Result<Self> {
        if sample_shape.iter().product::<usize>() != self.sample_len() {
            return Err(Error::shape(format!(
                "cannot view samples of shape {:?} as {sample_shape:?}",
                self.sample_shape
            )));
        }
        self.sample_shape = sample_shape;
        Ok(self)
    }

    /// The first `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            inputs: self.inputs[..n * self.sample_len()].to_vec(),
            sample_shape: self.sample_shape.clone(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// Split into the first `n` samples and the rest, tagging them as train and test.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let cut = n * self.sample_len();
        let part = |inputs: &[f64], labels: &[usize], split| Self {
            inputs: inputs.to_vec(),
            sample_shape: self.sample_shape.clone(),
            labels: labels.to_vec(),
            classes: self.classes,
            split,
        };
        (
            part(&self.inputs[..cut], &self.labels[..n], Split::Train),
            part(&self.inputs[cut..], &self.labels[n..], Split::Test),
        )
    }

    /// Gather the given samples into contiguous buffers.
    pub fn gather(&self, indices: &[usize], inputs: &mut Vec<f64>, labels: &mut Vec<usize>) {
        inputs.clear();
        labels.clear();
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
    }
}
