use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SparsityMask, Tensor};

/// Fixed library of binary kernel masks; every kernel of a constrained layer
/// must keep exactly the positions of one library entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSet {
    pub kernel: [usize; 2],
    pub masks: Vec<Vec<bool>>,
}

impl PatternSet {
    pub fn new(kernel: [usize; 2], masks: Vec<Vec<bool>>) -> Result<Self> {
        let area = kernel[0] * kernel[1];
        if masks.is_empty() {
            return Err(Error::invalid("pattern library is empty"));
        }
        let nnz = masks[0].iter().filter(|&&b| b).count();
        for (i, m) in masks.iter().enumerate() {
            if m.len() != area {
                return Err(Error::invalid(format!("pattern {i} has {} entries, kernel needs {area}", m.len())));
            }
            if m.iter().filter(|&&b| b).count() != nnz {
                return Err(Error::invalid("library patterns must share one nonzero count"));
            }
            if masks[..i].contains(m) {
                return Err(Error::invalid(format!("pattern {i} duplicates an earlier entry")));
            }
        }
        Ok(Self { kernel, masks })
    }

    pub fn nnz(&self) -> usize {
        self.masks[0].iter().filter(|&&b| b).count()
    }

    /// Library index whose mask retains the most energy of `kernel`
    /// (ties → lowest index).
    pub fn best_mask(&self, kernel: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, m) in self.masks.iter().enumerate() {
            let e = retained_energy(kernel, m);
            if e > best.1 {
                best = (i, e);
            }
        }
        best.0
    }
}

pub fn retained_energy(kernel: &[f64], mask: &[bool]) -> f64 {
    kernel.iter().zip(mask).filter(|(_, &k)| k).map(|(x, _)| x * x).sum()
}

/// Symmetric uniform levels `k·Δ`, `|k| ≤ 2^(q-1) - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantLevels {
    pub bits: u32,
    pub delta: f64,
}

impl QuantLevels {
    /// Spacing from `max|W|` so the extreme weight sits on the top level.
    pub fn from_weights(w: &Tensor, bits: u32) -> Result<Self> {
        if !(2..=32).contains(&bits) {
            return Err(Error::invalid(format!("quantization needs 2..=32 bits, got {bits}")));
        }
        let q = Self {
            bits,
            delta: w.max_abs() / Self::top(bits) as f64,
        };
        Ok(q)
    }

    fn top(bits: u32) -> i64 {
        (1i64 << (bits - 1)) - 1
    }

    pub fn max_level(&self) -> i64 {
        Self::top(self.bits)
    }

    pub fn level(&self, k: i64) -> f64 {
        k as f64 * self.delta
    }

    /// Nearest level; equidistant points go to the level nearer zero.
    pub fn quantize(&self, w: f64) -> f64 {
        if self.delta == 0.0 {
            return 0.0;
        }
        let top = self.max_level();
        let k0 = ((w.abs() / self.delta).floor() as i64).min(top);
        let k1 = (k0 + 1).min(top);
        let s = if w < 0.0 { -1 } else { 1 };
        let (l0, l1) = (self.level(s * k0), self.level(s * k1));
        if (w - l1).abs() < (w - l0).abs() {
            l1
        } else {
            l0
        }
    }

    pub fn contains(&self, w: f64) -> bool {
        self.quantize(w) == w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "set", rename_all = "snake_case")]
pub enum ConstraintSet {
    /// No constraint (g ≡ 0). The layer takes no part in the splitting.
    Whole,
    Pattern(PatternSet),
    Quant(QuantLevels),
    /// At most `keep` nonzeros in the layer.
    L0Budget { keep: usize },
}

impl ConstraintSet {
    pub fn is_trivial(&self) -> bool {
        matches!(self, ConstraintSet::Whole)
    }

    pub fn check_shape(&self, shape: &[usize]) -> Result<()> {
        match self {
            ConstraintSet::Pattern(p) => {
                if shape.len() != 4 || shape[2] != p.kernel[0] || shape[3] != p.kernel[1] {
                    return Err(Error::shape(format!(
                        "pattern set for {}x{} kernels applied to weight {shape:?}",
                        p.kernel[0], p.kernel[1]
                    )));
                }
            }
            ConstraintSet::L0Budget { keep } => {
                let n: usize = shape.iter().product();
                if *keep > n {
                    return Err(Error::invalid(format!("budget {keep} exceeds layer size {n}")));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Euclidean projection onto the set, plus the support the result is
/// confined to (all-ones for sets that do not restrict positions).
pub fn project_with_support(point: &Tensor, set: &ConstraintSet) -> Result<(Tensor, SparsityMask)> {
    set.check_shape(point.shape())?;
    if !point.all_finite() {
        return Err(Error::invalid("projection of non-finite weights"));
    }
    let mut out = point.clone();
    let mut keep = vec![true; point.len()];
    match set {
        ConstraintSet::Whole => {}
        ConstraintSet::Pattern(p) => {
            let area = p.kernel[0] * p.kernel[1];
            for (kernel, flags) in out.data_mut().chunks_mut(area).zip(keep.chunks_mut(area)) {
                let m = &p.masks[p.best_mask(kernel)];
                for ((x, f), &k) in kernel.iter_mut().zip(flags.iter_mut()).zip(m) {
                    if !k {
                        *x = 0.0;
                    }
                    *f = k;
                }
            }
        }
        ConstraintSet::Quant(q) => {
            for x in out.data_mut() {
                *x = q.quantize(*x);
            }
        }
        ConstraintSet::L0Budget { keep: budget } => {
            let kept = top_k(point.data(), *budget);
            for ((x, f), k) in out.data_mut().iter_mut().zip(keep.iter_mut()).zip(kept) {
                if !k {
                    *x = 0.0;
                }
                *f = k;
            }
        }
    }
    Ok((out, SparsityMask::new(point.shape().to_vec(), keep)?))
}

pub fn project(point: &Tensor, set: &ConstraintSet) -> Result<Tensor> {
    project_with_support(point, set).map(|(t, _)| t)
}

/// Flags of the `k` largest magnitudes (ties → lowest index).
fn top_k(values: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut keep = vec![false; values.len()];
    for &i in &order[..k] {
        keep[i] = true;
    }
    keep
}

/// Whether `w` already lies in the set.
pub fn is_feasible(w: &Tensor, set: &ConstraintSet) -> Result<bool> {
    set.check_shape(w.shape())?;
    Ok(match set {
        ConstraintSet::Whole => true,
        ConstraintSet::Pattern(p) => {
            let area = p.kernel[0] * p.kernel[1];
            w.data().chunks(area).all(|kernel| {
                p.masks
                    .iter()
                    .any(|m| kernel.iter().zip(m).all(|(&x, &k)| k || x == 0.0))
            })
        }
        ConstraintSet::Quant(q) => w.data().iter().all(|&x| q.contains(x)),
        ConstraintSet::L0Budget { keep } => w.data().iter().filter(|&&x| x != 0.0).count() <= *keep,
    })
}

pub const DEFAULT_LIBRARY_SIZE: usize = 8;
pub const DEFAULT_PATTERN_NNZ: usize = 4;

fn mask_bits(mask: &[bool]) -> Vec<u8> {
    mask.iter().map(|&b| b as u8).collect()
}

/// Most frequent top-`nnz` kernel masks across `weights` (all 4-D, 3×3
/// kernels). Frequency ties and padding order follow the 0/1 sequence of the
/// mask; padding draws the unused masks retaining the most total energy.
pub fn build_pattern_library(weights: &[&Tensor], size: usize, nnz: usize) -> Result<PatternSet> {
    const AREA: usize = 9;
    if weights.is_empty() {
        return Err(Error::invalid("pattern library needs at least one conv layer"));
    }
    if nnz == 0 || nnz > AREA || size == 0 || size > binomial(AREA, nnz) {
        return Err(Error::invalid(format!("cannot pick {size} distinct patterns of {nnz}/9")));
    }
    let mut counts: HashMap<Vec<bool>, usize> = HashMap::new();
    for w in weights {
        let s = w.shape();
        if s.len() != 4 || s[2] != 3 || s[3] != 3 {
            return Err(Error::shape(format!("pattern library needs 3x3 kernels, got {s:?}")));
        }
        for kernel in w.data().chunks(AREA) {
            *counts.entry(top_k(kernel, nnz)).or_default() += 1;
        }
    }
    let mut ranked: Vec<(Vec<bool>, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| mask_bits(&a.0).cmp(&mask_bits(&b.0))));
    let mut masks: Vec<Vec<bool>> = ranked.into_iter().take(size).map(|(m, _)| m).collect();
    if masks.len() < size {
        let mut energy: Vec<(Vec<bool>, f64)> = all_masks(AREA, nnz)
            .into_iter()
            .filter(|m| !masks.contains(m))
            .map(|m| {
                let e = weights
                    .iter()
                    .flat_map(|w| w.data().chunks(AREA))
                    .map(|k| retained_energy(k, &m))
                    .sum();
                (m, e)
            })
            .collect();
        energy.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| mask_bits(&a.0).cmp(&mask_bits(&b.0))));
        let missing = size - masks.len();
        masks.extend(energy.into_iter().take(missing).map(|(m, _)| m));
    }
    PatternSet::new([3, 3], masks)
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Every mask over `area` positions with exactly `nnz` ones.
pub fn all_masks(area: usize, nnz: usize) -> Vec<Vec<bool>> {
    (0u32..1 << area)
        .filter(|b| b.count_ones() as usize == nnz)
        .map(|b| (0..area).map(|j| b >> j & 1 == 1).collect())
        .collect()
}
