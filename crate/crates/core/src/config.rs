//! Experiment configuration: a flat TOML file with typed keys that fully
//! determines a run — (config, seed, data files) always reproduce the same
//! artifacts byte for byte. Relative dataset paths resolve against the
//! `TOURBILLON_DATA` environment variable (default `data`).

use crate::error::{Error, Result};
use crate::layer::{Activation, LayerSpec};
use crate::recirc::{TrainParams, TrainRule};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    TrainCae,
    TrainTourbillon,
    FineTune,
    Tourbillonize,
    Eval,
    ExportEmbeddings,
}

impl RunKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunKind::TrainCae => "train-cae",
            RunKind::TrainTourbillon => "train-tourbillon",
            RunKind::FineTune => "fine-tune",
            RunKind::Tourbillonize => "tourbillonize",
            RunKind::Eval => "eval",
            RunKind::ExportEmbeddings => "export-embeddings",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Idx,
    Cifar10,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub train_batches: Vec<PathBuf>,
    #[serde(default)]
    pub test_batches: Vec<PathBuf>,
    /// Keep only the first n training / test samples.
    #[serde(default)]
    pub take_train: Option<usize>,
    #[serde(default)]
    pub take_test: Option<usize>,
    /// Flatten samples to vectors (dense architectures).
    #[serde(default)]
    pub flatten: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// input -> hinge -> input, tanh hinge, logistic reconstruction.
    DenseCae { hinge: usize },
    /// Same-padding conv encoder/decoder with tanh hinge of `channels` maps.
    ConvCae {
        kernel: usize,
        channels: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    /// Stack of dense autoencoders with the given hinge sizes plus a softmax
    /// head over `classes`.
    DenseStack { hinges: Vec<usize>, classes: usize },
    /// The two-level convolutional stack: stride-1 conv to (H, W, channels),
    /// then stride-2 conv to (H/2, W/2, channels), plus a softmax head.
    ConvStack {
        kernel: usize,
        channels: usize,
        classes: usize,
    },
    /// Feed-forward autoencoder (tanh hidden, logistic output): the hidden
    /// sizes listed, with the output size equal to the input size.
    DenseUnet { sizes: Vec<usize> },
    /// Feed-forward classifier (tanh hidden, softmax output).
    DenseClassifier { sizes: Vec<usize>, classes: usize },
    /// Explicit layer list.
    Layers { layers: Vec<LayerSpec> },
}

fn one() -> usize {
    1
}

fn default_gamma() -> f64 {
    0.9
}

fn default_momentum() -> f64 {
    0.8
}

fn default_batch() -> usize {
    64
}

fn default_head_rate() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub rule: Option<TrainRule>,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub rates: Vec<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub derivative_weighted: bool,
    /// Head phase (stacks and classifier twins).
    #[serde(default)]
    pub head_epochs: Option<usize>,
    #[serde(default = "default_head_rate")]
    pub head_rate: f64,
    /// Decoder-channel fine-tuning epochs appended after a tourbillonize run.
    #[serde(default)]
    pub fine_tune_epochs: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    pub level: usize,
    pub sample_count: usize,
    #[serde(default = "default_embeddings_csv")]
    pub out_csv: PathBuf,
}

fn default_embeddings_csv() -> PathBuf {
    PathBuf::from("embeddings.csv")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kind: RunKind,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Model to load for eval / fine-tune / export-embeddings.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub export: Option<ExportConfig>,
}

pub const DATA_ROOT_ENV: &str = "TOURBILLON_DATA";

/// Resolve a dataset path against the data root (absolute paths unchanged).
pub fn resolve_data_path(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        let root = std::env::var(DATA_ROOT_ENV).unwrap_or_else(|_| "data".into());
        Path::new(&root).join(p)
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match self.data.format {
            DataFormat::Idx => {
                if self.data.train_images.is_none() || self.data.train_labels.is_none() {
                    return Err(Error::Config(
                        "data.train_images and data.train_labels are required for format=idx"
                            .into(),
                    ));
                }
            }
            DataFormat::Cifar10 => {
                if self.data.train_batches.is_empty() {
                    return Err(Error::Config(
                        "data.train_batches is required for format=cifar10".into(),
                    ));
                }
            }
        }
        if let Some(t) = &self.train {
            if t.epochs == 0 {
                return Err(Error::Config("train.epochs must be at least 1".into()));
            }
            if t.batch_size == 0 {
                return Err(Error::Config("train.batch_size must be at least 1".into()));
            }
            if !(t.gamma > 0.0 && t.gamma <= 1.0) {
                return Err(Error::Config("train.gamma must be in (0, 1]".into()));
            }
            if t.momentum < 0.0 || t.momentum >= 1.0 {
                return Err(Error::Config("train.momentum must be in [0, 1)".into()));
            }
            if t.rates.iter().any(|r| *r < 0.0) {
                return Err(Error::Config("train.rates must be non-negative".into()));
            }
        }
        match self.kind {
            RunKind::TrainCae | RunKind::TrainTourbillon | RunKind::Tourbillonize => {
                if self.model.is_none() {
                    return Err(Error::Config(format!(
                        "[model] is required for kind={}",
                        self.kind.as_str()
                    )));
                }
                if self.train.is_none() {
                    return Err(Error::Config(format!(
                        "[train] is required for kind={}",
                        self.kind.as_str()
                    )));
                }
            }
            RunKind::FineTune => {
                if self.checkpoint.is_none() {
                    return Err(Error::Config("checkpoint is required for kind=fine-tune".into()));
                }
                if self.train.is_none() {
                    return Err(Error::Config("[train] is required for kind=fine-tune".into()));
                }
            }
            RunKind::Eval => {
                if self.checkpoint.is_none() {
                    return Err(Error::Config("checkpoint is required for kind=eval".into()));
                }
            }
            RunKind::ExportEmbeddings => {
                if self.checkpoint.is_none() || self.export.is_none() {
                    return Err(Error::Config(
                        "checkpoint and [export] are required for kind=export-embeddings".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Fully-resolved copy: defaults materialized (already by serde) and
    /// dataset paths made absolute, so the echo re-runs identically anywhere.
    pub fn resolved(&self) -> RunConfig {
        let mut cfg = self.clone();
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                *path = resolve_data_path(path);
            }
        };
        fix(&mut cfg.data.train_images);
        fix(&mut cfg.data.train_labels);
        fix(&mut cfg.data.test_images);
        fix(&mut cfg.data.test_labels);
        for b in cfg
            .data
            .train_batches
            .iter_mut()
            .chain(cfg.data.test_batches.iter_mut())
        {
            *b = resolve_data_path(b);
        }
        cfg
    }
}

/// Built-in activation convention for classifiers/autoencoders assembled from
/// the model presets: tanh hidden layers, with the output matching the task.
pub fn dense_unet_layers(input: usize, sizes: &[usize]) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut cur = input;
    for &s in sizes {
        layers.push(LayerSpec::dense(cur, s));
        layers.push(LayerSpec::activation(Activation::Tanh));
        cur = s;
    }
    layers.push(LayerSpec::dense(cur, input));
    layers.push(LayerSpec::activation(Activation::Logistic));
    layers
}

pub fn dense_classifier_layers(input: usize, sizes: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut cur = input;
    for &s in sizes {
        layers.push(LayerSpec::dense(cur, s));
        layers.push(LayerSpec::activation(Activation::Tanh));
        cur = s;
    }
    layers.push(LayerSpec::dense(cur, classes));
    layers.push(LayerSpec::activation(Activation::Softmax));
    layers
}

impl TrainConfig {
    /// Training parameters with the rate list defaulted for `n_adaptive`
    /// layers when the config left it empty.
    pub fn to_params(&self, seed: u64, n_adaptive: usize, default_rate: f64) -> TrainParams {
        let rates = if self.rates.is_empty() {
            vec![default_rate; n_adaptive]
        } else {
            self.rates.clone()
        };
        TrainParams {
            epochs: self.epochs,
            batch_size: self.batch_size,
            rates,
            gamma: self.gamma,
            momentum: self.momentum,
            seed,
            derivative_weighted: self.derivative_weighted,
        }
    }
}
