use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("ADMM diverged: {0}")]
    Divergence(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while decoding IDX (MNIST) files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("expected image magic 0x00000803, found {found:#010x}")]
    ImageMagic { found: u32 },

    #[error("expected label magic 0x00000801, found {found:#010x}")]
    LabelMagic { found: u32 },

    #[error("truncated IDX file at byte offset {offset}: needed {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {label} at byte offset {offset} is outside 0..{classes}")]
    LabelRange {
        label: u8,
        offset: usize,
        classes: usize,
    },

    #[error("IDX dimensions overflow addressable memory")]
    Overflow,
}

/// Failures while decoding a checkpoint.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated checkpoint at byte offset {offset}")]
    Truncated { offset: usize },

    #[error("unknown dtype tag {0}")]
    Dtype(u8),

    #[error("layer {layer}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("layer {layer}: corrupt mask padding bits")]
    MaskPadding { layer: String },

    #[error("layer {layer}: masked weight at flat index {index} is nonzero")]
    MaskViolation { layer: String, index: usize },

    #[error("layer {layer}: non-finite value")]
    NonFinite { layer: String },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("metadata record: {0}")]
    Metadata(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),

    #[error("invalid config: {0}")]
    Invalid(String),
}
