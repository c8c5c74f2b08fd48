//! Minimal feed-forward training engine: dense and conv layers, softmax
//! cross-entropy, exact backprop, SGD/Adam with gradient masking.

mod gemm;
pub mod layers;
pub mod network;
pub mod optim;
pub mod train;

pub use layers::{mlp, small_convnet, LayerSpec};
pub use network::{apply_gradient_mask, softmax_cross_entropy, Gradients, Network, Param};
pub use optim::{OptimizerKind, OptimizerState};
pub use train::{evaluate, mean_loss, EpochStats, Objective, TrainSettings, Trainer};
