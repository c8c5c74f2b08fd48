//! Dense row-major tensors and the group views used by the structured regularizers.
//!
//! Convolution weights use the `[A, B, C, D]` layout: filters, input channels,
//! kernel height, kernel width. Dense weights are `[out, in]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Layer weights `W_i`.
pub type WeightTensor = Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    L1,
    FrobeniusSq,
    /// Number of entries with `|w| > tol`.
    L0Count { tol: f64 },
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = checked_numel(&shape)?;
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn norm(&self, kind: NormKind) -> f64 {
        match kind {
            NormKind::L1 => self.data.iter().map(|x| x.abs()).sum(),
            NormKind::FrobeniusSq => self.data.iter().map(|x| x * x).sum(),
            NormKind::L0Count { tol } => self.data.iter().filter(|x| x.abs() > tol).count() as f64,
        }
    }

    /// The four conv dimensions `[A, B, C, D]`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        dims4(&self.shape)
    }

    pub fn group_slices(&self, kind: GroupKind) -> Result<Vec<GroupView>> {
        group_slices(&self.shape, kind)
    }

    /// `||x - y||_F` for equally shaped tensors.
    pub fn distance(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("zero dimension in {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))
}

pub(crate) fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(format!(
            "group views need a 4-D conv weight, got shape {shape:?}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupKind {
    /// `W[a, :, :, :]`
    Filter,
    /// `W[:, b, c, d]`
    ShapePosition,
    /// `W[a, b, :, :]`
    Kernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupIndex {
    Filter(usize),
    ShapePosition(usize, usize, usize),
    Kernel(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupView {
    pub kind: GroupKind,
    pub index: GroupIndex,
    /// Flat row-major indices of the addressed slice.
    pub members: Vec<usize>,
}

impl GroupView {
    pub fn frobenius_sq(&self, data: &[f64]) -> f64 {
        self.members.iter().map(|&i| data[i] * data[i]).sum()
    }
}

pub fn group_count(shape: &[usize], kind: GroupKind) -> Result<usize> {
    let [a, b, c, d] = dims4(shape)?;
    Ok(match kind {
        GroupKind::Filter => a,
        GroupKind::ShapePosition => b * c * d,
        GroupKind::Kernel => a * b,
    })
}

/// Group id of every element, in flat order. Group ids follow the same
/// lexicographic enumeration as [`group_slices`].
pub fn group_assignment(shape: &[usize], kind: GroupKind) -> Result<Vec<usize>> {
    let [a, b, c, d] = dims4(shape)?;
    let per_filter = b * c * d;
    let per_kernel = c * d;
    Ok((0..a * per_filter)
        .map(|flat| match kind {
            GroupKind::Filter => flat / per_filter,
            GroupKind::ShapePosition => flat % per_filter,
            GroupKind::Kernel => flat / per_kernel,
        })
        .collect())
}

/// Partition a 4-D weight into disjoint groups, enumerated lexicographically
/// by group index.
pub fn group_slices(shape: &[usize], kind: GroupKind) -> Result<Vec<GroupView>> {
    let [a, b, c, d] = dims4(shape)?;
    let flat = |ia: usize, ib: usize, ic: usize, id: usize| ((ia * b + ib) * c + ic) * d + id;
    let mut out = Vec::with_capacity(group_count(shape, kind)?);
    match kind {
        GroupKind::Filter => {
            for ia in 0..a {
                let start = flat(ia, 0, 0, 0);
                out.push(GroupView {
                    kind,
                    index: GroupIndex::Filter(ia),
                    members: (start..start + b * c * d).collect(),
                });
            }
        }
        GroupKind::ShapePosition => {
            for ib in 0..b {
                for ic in 0..c {
                    for id in 0..d {
                        out.push(GroupView {
                            kind,
                            index: GroupIndex::ShapePosition(ib, ic, id),
                            members: (0..a).map(|ia| flat(ia, ib, ic, id)).collect(),
                        });
                    }
                }
            }
        }
        GroupKind::Kernel => {
            for ia in 0..a {
                for ib in 0..b {
                    let start = flat(ia, ib, 0, 0);
                    out.push(GroupView {
                        kind,
                        index: GroupIndex::Kernel(ia, ib),
                        members: (start..start + c * d).collect(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Binary keep-mask paired with a weight tensor. `false` marks a permanently
/// zeroed weight.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityMask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl SparsityMask {
    pub fn ones(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            keep: vec![true; shape.iter().product()],
        }
    }

    pub fn new(shape: Vec<usize>, keep: Vec<bool>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if n != keep.len() {
            return Err(Error::shape(format!(
                "mask shape {shape:?} needs {n} entries, got {}",
                keep.len()
            )));
        }
        Ok(Self { shape, keep })
    }

    /// Mask that keeps exactly the nonzero entries of `w`.
    pub fn from_nonzero(w: &Tensor) -> Self {
        Self {
            shape: w.shape().to_vec(),
            keep: w.data().iter().map(|&x| x != 0.0).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn is_kept(&self, index: usize) -> bool {
        self.keep[index]
    }

    /// Zero `index` permanently.
    pub fn prune(&mut self, index: usize) {
        self.keep[index] = false;
    }

    /// Element-wise AND: the pruned set of the result is the union of both.
    pub fn intersect(&mut self, other: &SparsityMask) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "mask shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (k, &o) in self.keep.iter_mut().zip(&other.keep) {
            *k &= o;
        }
        Ok(())
    }

    /// True if every position pruned in `earlier` is still pruned here.
    pub fn is_refinement_of(&self, earlier: &SparsityMask) -> bool {
        self.shape == earlier.shape
            && self
                .keep
                .iter()
                .zip(&earlier.keep)
                .all(|(&now, &before)| before || !now)
    }

    pub fn apply(&self, t: &mut Tensor) -> Result<()> {
        if self.shape != t.shape() {
            return Err(Error::shape(format!(
                "mask shape {:?} does not match tensor shape {:?}",
                self.shape,
                t.shape()
            )));
        }
        for (x, &k) in t.data_mut().iter_mut().zip(&self.keep) {
            if !k {
                *x = 0.0;
            }
        }
        Ok(())
    }
}
