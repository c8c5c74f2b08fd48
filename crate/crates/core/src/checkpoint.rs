//! Binary checkpoints of a network, its masks and a JSON metadata record.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RWP1"  u32 version  u32 layer_count
//! per layer:
//!   u16 name_len, name bytes (UTF-8)
//!   u8 ndim, ndim x u32 dims
//!   u8 dtype (0 = f64, 1 = f32)
//!   weights, then u32 bias_len and biases, in dtype
//!   u8 has_mask; if 1, ceil(n / 8) bytes, bit i of byte i / 8 (LSB first) = keep
//! u32 metadata_len, metadata as UTF-8 JSON
//! ```
//!
//! Mask padding bits must be zero, a masked weight must be exactly zero and
//! nothing may follow the metadata record.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::nn::{LayerSpec, Network, Param};
use crate::tensor::{SparsityMask, Tensor};

pub const MAGIC: &[u8; 4] = b"RWP1";
pub const FORMAT_VERSION: u32 = 1;

const MAX_NDIM: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F64,
    /// Lossy: values are rounded to the nearest `f32` on save.
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, CheckpointError> {
        match tag {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            t => Err(CheckpointError::Dtype(t)),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

/// Everything needed to rebuild the network plus free-form provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Snapshot of the run configuration that produced the checkpoint.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub dtype: Dtype,
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub mask: Option<SparsityMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layers: Vec<LayerRecord>,
    pub metadata: Metadata,
}

impl Checkpoint {
    pub fn from_network(net: &Network, dtype: Dtype, config: Option<serde_json::Value>) -> Self {
        let layers = net
            .layer_names()
            .into_iter()
            .zip(net.params())
            .zip(net.masks())
            .map(|((name, p), m)| LayerRecord {
                name,
                dtype,
                weight: p.weight.clone(),
                bias: p.bias.clone(),
                mask: m.clone(),
            })
            .collect();
        Checkpoint {
            layers,
            metadata: Metadata {
                input_shape: net.input_shape().to_vec(),
                layers: net.layers().to_vec(),
                config,
                metrics: BTreeMap::new(),
            },
        }
    }

    pub fn with_metric(mut self, key: &str, value: f64) -> Self {
        self.metadata.metrics.insert(key.to_string(), value);
        self
    }

    /// Rebuild the network with its masks installed.
    pub fn to_network(&self) -> Result<Network> {
        let params = self
            .layers
            .iter()
            .map(|l| Param {
                weight: l.weight.clone(),
                bias: l.bias.clone(),
            })
            .collect();
        let mut net = Network::from_params(
            self.metadata.input_shape.clone(),
            self.metadata.layers.clone(),
            params,
        )?;
        let names = net.layer_names();
        for (i, l) in self.layers.iter().enumerate() {
            if l.name != names[i] {
                return Err(CheckpointError::Malformed(format!(
                    "layer {i} is named {:?}, architecture expects {:?}",
                    l.name, names[i]
                ))
                .into());
            }
            if let Some(m) = &l.mask {
                net.set_mask(i, m.clone())?;
            }
        }
        Ok(net)
    }

    /// Check names and weight shapes against `expected`.
    pub fn validate_against(&self, expected: &Network) -> Result<(), CheckpointError> {
        let names = expected.layer_names();
        if names.len() != self.layers.len() {
            return Err(CheckpointError::Malformed(format!(
                "expected {} layers, checkpoint has {}",
                names.len(),
                self.layers.len()
            )));
        }
        for ((name, p), l) in names.iter().zip(expected.params()).zip(&self.layers) {
            if *name != l.name || p.weight.shape() != l.weight.shape() || p.bias.len() != l.bias.len() {
                let mut exp = p.weight.shape().to_vec();
                exp.push(p.bias.len());
                let mut found = l.weight.shape().to_vec();
                found.push(l.bias.len());
                return Err(CheckpointError::ShapeMismatch {
                    layer: format!("{name} (found {})", l.name),
                    expected: exp,
                    found,
                });
            }
        }
        Ok(())
    }
}

fn put_values(out: &mut Vec<u8>, values: &[f64], dtype: Dtype) {
    for &v in values {
        match dtype {
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("{what} {n} exceeds the checkpoint format")))
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(ckpt.layers.len(), "layer count")?.to_le_bytes());
    for l in &ckpt.layers {
        let name = l.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| Error::invalid("layer name too long"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        let ndim = u8::try_from(l.weight.ndim())
            .ok()
            .filter(|&d| d <= MAX_NDIM)
            .ok_or_else(|| Error::invalid("too many weight dimensions"))?;
        out.push(ndim);
        for &d in l.weight.shape() {
            out.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
        }
        out.push(l.dtype.tag());
        put_values(&mut out, l.weight.data(), l.dtype);
        out.extend_from_slice(&u32_len(l.bias.len(), "bias length")?.to_le_bytes());
        put_values(&mut out, &l.bias, l.dtype);
        match &l.mask {
            None => out.push(0),
            Some(m) => {
                if m.shape() != l.weight.shape() {
                    return Err(Error::shape(format!("layer {}: mask shape differs from weights", l.name)));
                }
                out.push(1);
                let mut bits = vec![0u8; m.len().div_ceil(8)];
                for (i, &k) in m.keep().iter().enumerate() {
                    if k {
                        bits[i / 8] |= 1 << (i % 8);
                    }
                }
                out.extend_from_slice(&bits);
            }
        }
    }
    let meta = serde_json::to_vec(&ckpt.metadata).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    out.extend_from_slice(&u32_len(meta.len(), "metadata length")?.to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated { offset: self.pos })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn values(&mut self, n: usize, dtype: Dtype, layer: &str) -> Result<Vec<f64>, CheckpointError> {
        let len = n
            .checked_mul(dtype.width())
            .ok_or_else(|| CheckpointError::Malformed(format!("layer {layer}: size overflow")))?;
        let raw = self.take(len)?;
        let values: Vec<f64> = match dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite { layer: layer.to_string() });
        }
        Ok(values)
    }
}

fn decode_layer(r: &mut Reader<'_>) -> Result<LayerRecord, CheckpointError> {
    let name_len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| CheckpointError::Malformed("layer name is not UTF-8".into()))?
        .to_string();
    let ndim = r.u8()?;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(CheckpointError::Malformed(format!("layer {name}: {ndim} dimensions")));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| CheckpointError::Malformed(format!("layer {name}: size overflow")))?;
    let dtype = Dtype::from_tag(r.u8()?)?;
    let weights = r.values(n, dtype, &name)?;
    let bias_len = r.u32()? as usize;
    let bias = r.values(bias_len, dtype, &name)?;
    let mask = match r.u8()? {
        0 => None,
        1 => {
            let bits = r.take(n.div_ceil(8))?;
            if n % 8 != 0 && bits[n / 8] >> (n % 8) != 0 {
                return Err(CheckpointError::MaskPadding { layer: name });
            }
            let keep: Vec<bool> = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
            if let Some(index) = (0..n).find(|&i| !keep[i] && weights[i] != 0.0) {
                return Err(CheckpointError::MaskViolation { layer: name, index });
            }
            Some(SparsityMask::new(shape.clone(), keep).expect("length matches shape"))
        }
        f => return Err(CheckpointError::Malformed(format!("layer {name}: mask flag {f}"))),
    };
    let weight = Tensor::new(shape, weights).expect("length matches shape");
    Ok(LayerRecord {
        name,
        dtype,
        weight,
        bias,
        mask,
    })
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    r.pos = 4;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    // Every layer takes at least 12 bytes, which bounds the allocation.
    let mut layers = Vec::with_capacity(count.min(bytes.len() / 12));
    for _ in 0..count {
        layers.push(decode_layer(&mut r)?);
    }
    let meta_len = r.u32()? as usize;
    let meta = r.take(meta_len)?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after metadata",
            bytes.len() - r.pos
        )));
    }
    let metadata: Metadata =
        serde_json::from_slice(meta).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    Ok(Checkpoint { layers, metadata })
}

/// Write atomically: the bytes go to a sibling temp file that is renamed over `path`.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

/// Load a checkpoint, optionally checking it against an expected architecture.
pub fn load(path: &Path, expected: Option<&Network>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = decode(&bytes)?;
    if let Some(net) = expected {
        ckpt.validate_against(net)?;
    }
    Ok(ckpt)
}

pub fn save_network(path: &Path, net: &Network, config: Option<serde_json::Value>) -> Result<()> {
    save(path, &Checkpoint::from_network(net, Dtype::F64, config))
}

pub fn load_network(path: &Path) -> Result<Network> {
    load(path, None)?.to_network()
}
