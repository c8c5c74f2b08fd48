use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::seed::rng_from;
use crate::tensor::Tensor;

/// Compressed-sensing style regression instance `y = X w + σ·noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRegression {
    /// `[m, n]` standard-normal design matrix.
    pub design: Tensor,
    pub targets: Vec<f64>,
    pub truth: Vec<f64>,
    /// Sorted indices of the nonzero entries of `truth`.
    pub support: Vec<usize>,
}

impl SparseRegression {
    pub fn dims(&self) -> (usize, usize) {
        (self.design.shape()[0], self.design.shape()[1])
    }
}

pub fn gen_sparse_regression(n: usize, k: usize, m: usize, sigma: f64, seed: u64) -> Result<SparseRegression> {
    if n == 0 || m == 0 || k > n || sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "invalid regression dims n={n} k={k} m={m} sigma={sigma}"
        )));
    }
    let mut rng = rng_from(seed);
    let design: Vec<f64> = (0..m * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut support = sample(&mut rng, n, k).into_vec();
    support.sort_unstable();
    let mut truth = vec![0.0; n];
    for &i in &support {
        let magnitude = rng.random_range(0.5..=1.5);
        truth[i] = if rng.random_bool(0.5) { magnitude } else { -magnitude };
    }
    let targets = design
        .chunks_exact(n)
        .map(|row| {
            let clean: f64 = row.iter().zip(&truth).map(|(a, w)| a * w).sum();
            let noise: f64 = StandardNormal.sample(&mut rng);
            clean + sigma * noise
        })
        .collect();
    Ok(SparseRegression {
        design: Tensor::new(vec![m, n], design)?,
        targets,
        truth,
        support,
    })
}

/// Small separable classification set: each class has a random prototype in
/// `[0.2, 0.8]^d` and samples are prototype plus clipped uniform jitter.
pub fn gen_gaussian_classes(
    classes: usize,
    sample_shape: &[usize],
    per_class: usize,
    jitter: f64,
    seed: u64,
) -> Result<Dataset> {
    let d: usize = sample_shape.iter().product();
    if classes == 0 || d == 0 || per_class == 0 {
        return Err(Error::invalid("empty synthetic dataset"));
    }
    let mut rng = rng_from(seed);
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..d).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect();
    let mut inputs = Vec::with_capacity(classes * per_class * d);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..classes * per_class {
        let c = i % classes;
        for &p in &prototypes[c] {
            let x: f64 = p + jitter * rng.random_range(-1.0..1.0);
            inputs.push(x.clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Dataset::new(inputs, sample_shape.to_vec(), labels, classes, Split::Synthetic)
}
