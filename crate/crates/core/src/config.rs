//! TOML run configuration shared by every CLI command.
//!
//! Every table rejects unknown keys. Sections a command does not use may be
//! omitted and fall back to their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::admm::{AdmmConfig, AdmmRegularizer};
use crate::data::{gen_gaussian_classes, load_mnist_split, Dataset, Split};
use crate::error::{ConfigError, Error, Result};
use crate::nn::{mlp, small_convnet, LayerSpec, OptimizerKind, TrainSettings};
use crate::pipeline::PruneStepConfig;
use crate::regularizers::RegularizerKind;
use crate::report::DEFAULT_INDEX_BITS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every stage derives its own stream from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub admm: AdmmSection,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            prune: PruneConfig::default(),
            admm: AdmmSection::default(),
            report: ReportConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Fully connected network on flattened inputs.
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    /// Two 3x3 conv blocks and one hidden dense layer.
    Convnet {
        c1: usize,
        c2: usize,
        hidden: usize,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    Custom { layers: Vec<LayerSpec> },
}

fn default_classes() -> usize {
    10
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mlp {
            hidden: vec![300, 100],
            classes: 10,
        }
    }
}

impl ModelConfig {
    pub fn is_conv(&self) -> bool {
        match self {
            ModelConfig::Mlp { .. } => false,
            ModelConfig::Convnet { .. } => true,
            ModelConfig::Custom { layers } => layers.iter().any(|l| matches!(l, LayerSpec::Conv2d { .. })),
        }
    }

    /// Layers for samples of the given image shape `[channels, h, w]`.
    pub fn layers(&self, image_shape: &[usize]) -> Vec<LayerSpec> {
        match self {
            ModelConfig::Mlp { hidden, classes } => mlp(hidden, image_shape.iter().product(), *classes),
            ModelConfig::Convnet { c1, c2, hidden, classes } => small_convnet(*c1, *c2, *hidden, *classes),
            ModelConfig::Custom { layers } => layers.clone(),
        }
    }

    /// Per-sample input shape: flat for MLPs, `[c, h, w]` otherwise.
    pub fn input_shape(&self, image_shape: &[usize]) -> Vec<usize> {
        if self.is_conv() {
            image_shape.to_vec()
        } else {
            vec![image_shape.iter().product()]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Uncompressed IDX files in `path`.
    Mnist {
        path: PathBuf,
        /// Use only the first `n` training images.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Seeded separable classes on 28x28 single-channel images.
    Synthetic {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_jitter")]
        jitter: f64,
    },
}

fn default_jitter() -> f64 {
    0.2
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Mnist {
            path: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
        }
    }
}

pub const IMAGE_SHAPE: [usize; 3] = [1, 28, 28];

impl DataConfig {
    /// Load train and test sets, shaped for `model`. `seed` only affects synthetic data.
    pub fn load(&self, model: &ModelConfig, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self {
            DataConfig::Mnist {
                path,
                train_limit,
                test_limit,
            } => {
                let train = load_mnist_split(path, Split::Train)?;
                let test = load_mnist_split(path, Split::Test)?;
                (
                    train_limit.map_or(train.clone(), |n| train.head(n)),
                    test_limit.map_or(test.clone(), |n| test.head(n)),
                )
            }
            DataConfig::Synthetic {
                classes,
                train_per_class,
                test_per_class,
                jitter,
            } => {
                // One draw, split after the training prefix, so both halves share prototypes.
                let all = gen_gaussian_classes(*classes, &IMAGE_SHAPE, train_per_class + test_per_class, *jitter, seed)?;
                all.split_at(classes * train_per_class)
            }
        };
        let shape = model.input_shape(&IMAGE_SHAPE);
        Ok((train.reshaped(shape.clone())?, test.reshaped(shape)?))
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            DataConfig::Mnist { path, .. } => Some(path),
            DataConfig::Synthetic { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 100,
            optimizer: OptimizerKind::adam_default(),
        }
    }
}

impl TrainConfig {
    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub kind: RegularizerKind,
    /// Steps for `prune-multistep`; `prune` always runs one.
    pub steps: usize,
    /// Pretrained checkpoint; defaults to `<output_dir>/checkpoints/pretrained.rwp`.
    pub input: Option<PathBuf>,
    pub step: PruneStepConfig,
    /// Run a comparison method instead of the reweighted pipeline.
    pub baseline: Option<BaselineConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineConfig {
    /// Iterative global magnitude pruning towards `target`x.
    Magnitude {
        target: f64,
        #[serde(default = "default_rounds")]
        rounds: usize,
        #[serde(default = "default_baseline_retrain")]
        retrain_epochs: usize,
    },
    /// One solve with fixed unit penalties, thresholded by `prune.step.threshold`.
    StaticL1 { lambda: f64, epochs: usize },
}

fn default_rounds() -> usize {
    5
}

fn default_baseline_retrain() -> usize {
    2
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            kind: RegularizerKind::NonStructured,
            steps: 3,
            input: None,
            step: PruneStepConfig::default(),
            baseline: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdmmTask {
    /// Pattern constraint on every conv layer, optional soft kernel pruning.
    PatternKernel,
    /// Quantize an already pruned model, conv and dense layers at separate widths.
    PruneQuant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmSection {
    pub task: AdmmTask,
    pub conv_bits: u32,
    pub fc_bits: u32,
    pub index_bits: u32,
    pub input: Option<PathBuf>,
    pub run: AdmmConfig,
}

impl Default for AdmmSection {
    fn default() -> Self {
        Self {
            task: AdmmTask::PatternKernel,
            conv_bits: 3,
            fc_bits: 2,
            index_bits: DEFAULT_INDEX_BITS,
            input: None,
            run: AdmmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Checkpoints to report on; the first is the subject, the second (if any) the baseline.
    pub checkpoints: Vec<PathBuf>,
    /// Pre-regularization checkpoint for the critical-weight comparison.
    pub pretrained: Option<PathBuf>,
    /// End-of-regularization weights matching `checkpoints`, same order.
    pub regularized: Vec<PathBuf>,
    pub bin_width: f64,
    pub critical_quantile: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            checkpoints: Vec::new(),
            pretrained: None,
            regularized: Vec::new(),
            bin_width: 0.25,
            critical_quantile: 0.1,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: Error| ConfigError::Invalid(e.to_string());
        self.train.settings().validate().map_err(invalid)?;
        self.prune.step.validate().map_err(invalid)?;
        self.admm.run.validate().map_err(invalid)?;
        if self.prune.steps == 0 {
            return Err(ConfigError::Invalid("prune.steps must be at least 1".into()));
        }
        if self.prune.kind.is_grouped() && !self.model.is_conv() {
            return Err(ConfigError::Invalid("group kind requires conv layers".into()));
        }
        if let Some(AdmmRegularizer { kind, .. }) = &self.admm.run.regularizer {
            if kind.is_grouped() && !self.model.is_conv() {
                return Err(ConfigError::Invalid("group kind requires conv layers".into()));
            }
        }
        for bits in [self.admm.conv_bits, self.admm.fc_bits] {
            if !(2..=32).contains(&bits) {
                return Err(ConfigError::Invalid(format!("quantization bits {bits} outside 2..=32")));
            }
        }
        match self.prune.baseline {
            Some(BaselineConfig::Magnitude { target, rounds, .. }) if !(target >= 1.0 && rounds > 0) => {
                return Err(ConfigError::Invalid("magnitude baseline needs target >= 1 and rounds > 0".into()));
            }
            Some(BaselineConfig::StaticL1 { lambda, epochs }) if !(lambda >= 0.0 && epochs > 0) => {
                return Err(ConfigError::Invalid("static-l1 baseline needs lambda >= 0 and epochs > 0".into()));
            }
            _ => {}
        }
        if !(self.report.bin_width > 0.0 && self.report.bin_width.is_finite()) {
            return Err(ConfigError::Invalid("report.bin_width must be positive".into()));
        }
        if !(0.0 < self.report.critical_quantile && self.report.critical_quantile < 1.0) {
            return Err(ConfigError::Invalid("report.critical_quantile must lie in (0, 1)".into()));
        }
        let layers = self.model.layers(&IMAGE_SHAPE);
        let input = self.model.input_shape(&IMAGE_SHAPE);
        crate::nn::Network::from_params(
            input,
            layers.clone(),
            layers
                .iter()
                .filter_map(|l| {
                    Some(crate::nn::Param {
                        weight: crate::tensor::Tensor::zeros(&l.weight_shape()?),
                        bias: vec![0.0; l.bias_len()?],
                    })
                })
                .collect(),
        )
        .map_err(|e| ConfigError::Invalid(format!("model: {e}")))?;
        Ok(())
    }

    /// Checks that only matter to the `admm` command.
    pub fn validate_admm(&self) -> Result<(), ConfigError> {
        if self.admm.task == AdmmTask::PatternKernel && !self.model.is_conv() {
            return Err(ConfigError::Invalid("pattern task requires conv layers".into()));
        }
        Ok(())
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.output_dir.join("logs")
    }
}
