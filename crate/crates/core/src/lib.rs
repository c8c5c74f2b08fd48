//! Reweighted-regularization pruning and ADMM-based compression for small
//! feed-forward networks.

pub mod admm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod recovery;
pub mod regularizers;
pub mod report;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
