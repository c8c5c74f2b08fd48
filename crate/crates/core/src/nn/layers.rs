use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a feed-forward network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        filters: usize,
        channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    MaxPool2x2,
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn conv3x3(filters: usize, channels: usize) -> Self {
        LayerSpec::Conv2d {
            filters,
            channels,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 0,
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { input, output } => Some(vec![output, input]),
            LayerSpec::Conv2d {
                filters,
                channels,
                kernel_h,
                kernel_w,
                ..
            } => Some(vec![filters, channels, kernel_h, kernel_w]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { output, .. } => Some(output),
            LayerSpec::Conv2d { filters, .. } => Some(filters),
            _ => None,
        }
    }

    /// Output shape for a single sample of shape `input`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { input: n_in, output } => {
                if input != [n_in] {
                    return Err(Error::shape(format!(
                        "dense layer expects input [{n_in}], got {input:?}"
                    )));
                }
                Ok(vec![output])
            }
            LayerSpec::Conv2d {
                filters,
                channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let &[c, h, w] = input else {
                    return Err(Error::shape(format!(
                        "conv layer expects [channels, h, w], got {input:?}"
                    )));
                };
                if c != channels {
                    return Err(Error::shape(format!(
                        "conv layer expects {channels} channels, got {c}"
                    )));
                }
                if stride == 0 || filters == 0 || kernel_h == 0 || kernel_w == 0 {
                    return Err(Error::shape("conv layer with zero-sized parameter"));
                }
                if h + 2 * padding < kernel_h || w + 2 * padding < kernel_w {
                    return Err(Error::shape(format!(
                        "kernel {kernel_h}x{kernel_w} larger than padded input {h}x{w}"
                    )));
                }
                Ok(vec![
                    filters,
                    (h + 2 * padding - kernel_h) / stride + 1,
                    (w + 2 * padding - kernel_w) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2x2 => {
                let &[c, h, w] = input else {
                    return Err(Error::shape(format!(
                        "max-pool expects [channels, h, w], got {input:?}"
                    )));
                };
                if h < 2 || w < 2 {
                    return Err(Error::shape(format!("max-pool input {h}x{w} too small")));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// LeNet-300-100 style MLP for 28x28 inputs.
pub fn mlp(hidden: &[usize], input: usize, classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut prev = input;
    for &h in hidden {
        layers.push(LayerSpec::Dense {
            input: prev,
            output: h,
        });
        layers.push(LayerSpec::Relu);
        prev = h;
    }
    layers.push(LayerSpec::Dense {
        input: prev,
        output: classes,
    });
    layers
}

/// Small two-conv network for 1x28x28 inputs with 3x3 kernels.
pub fn small_convnet(c1: usize, c2: usize, hidden: usize, classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv3x3(c1, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::conv3x3(c2, c1),
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
        LayerSpec::Dense {
            input: c2 * 5 * 5,
            output: hidden,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            input: hidden,
            output: classes,
        },
    ]
}
