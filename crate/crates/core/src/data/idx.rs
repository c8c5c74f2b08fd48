//! IDX decoding. Both image (`0x00000803`) and label (`0x00000801`) files
//! use big-endian 32-bit headers followed by unsigned bytes.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, IdxError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            offset,
            needed: 4,
            available: bytes.len().saturating_sub(offset),
        })
}

fn payload(bytes: &[u8], offset: usize, needed: usize) -> Result<&[u8], IdxError> {
    let available = bytes.len().saturating_sub(offset);
    if available < needed {
        return Err(IdxError::Truncated {
            offset: bytes.len(),
            needed,
            available,
        });
    }
    Ok(&bytes[offset..offset + needed])
}

pub fn decode_idx_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(IdxError::ImageMagic { found: magic });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let needed = count
        .checked_mul(rows)
        .and_then(|x| x.checked_mul(cols))
        .ok_or(IdxError::Overflow)?;
    let pixels = payload(bytes, 16, needed)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(IdxError::LabelMagic { found: magic });
    }
    let count = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

/// Combine decoded images and labels into a normalized `[N, 1, rows, cols]` dataset.
pub fn images_to_dataset(images: IdxImages, labels: &[u8], split: Split) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        }
        .into());
    }
    if let Some((i, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= MNIST_CLASSES) {
        return Err(IdxError::LabelRange {
            label,
            offset: 8 + i,
            classes: MNIST_CLASSES,
        }
        .into());
    }
    if images.count == 0 {
        return Err(Error::EmptyDataset);
    }
    let inputs = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(
        inputs,
        vec![1, images.rows, images.cols],
        labels.iter().map(|&l| l as usize).collect(),
        MNIST_CLASSES,
        split,
    )
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_mnist_split(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
        Split::Synthetic => return Err(Error::invalid("MNIST has no synthetic split")),
    };
    let images = read_file(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels = read_file(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    images_to_dataset(decode_idx_images(&images)?, &decode_idx_labels(&labels)?, split)
}

#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

/// Load the standard uncompressed MNIST files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Mnist> {
    Ok(Mnist {
        train: load_mnist_split(dir, Split::Train)?,
        test: load_mnist_split(dir, Split::Test)?,
    })
}
