//! Versioned JSON configuration files. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use ienlab_core::layers::ActivationKind;
use ienlab_core::train::{gen_blobs, BlobsConfig, Method, MlpConfig, SplitDataset, TrainConfig};
use ienlab_core::variance::{ChainLayer, ChainMethod, VarChainSpec};
use ienlab_core::SeededRng;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Carries serde_json's line/column diagnostics.
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: unsupported config version {found} (expected {CONFIG_VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: field `{field}`: {message}")]
    Field {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("{path}: chain has no layers")]
    EmptyChain { path: PathBuf },
}

fn field(path: &Path, field: impl Into<String>, message: impl ToString) -> ConfigError {
    ConfigError::Field {
        path: path.to_path_buf(),
        field: field.into(),
        message: message.to_string(),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

fn check_version(path: &Path, found: u32) -> Result<(), ConfigError> {
    if found != CONFIG_VERSION {
        return Err(ConfigError::Version {
            path: path.to_path_buf(),
            found,
        });
    }
    Ok(())
}

/// A literal variance or an initialization rule evaluated against the layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightVariance {
    Value(f64),
    Init(InitRule),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitRule {
    /// `"ien"` gives `m / (β² n)`; `"base"` gives `1 / (β² n)`.
    pub init: String,
    #[serde(default = "one")]
    pub m: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainLayerConfig {
    pub fan_in: usize,
    pub weight_variance: WeightVariance,
    #[serde(default = "linear")]
    pub activation: String,
    #[serde(default = "base")]
    pub method: String,
}

fn linear() -> String {
    "linear".into()
}

fn base() -> String {
    "base".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub version: u32,
    #[serde(default = "unit")]
    pub input_variance: f64,
    /// Output width of the last layer in Monte Carlo runs; defaults to the
    /// last layer's fan-in.
    #[serde(default)]
    pub width: Option<usize>,
    pub layers: Vec<ChainLayerConfig>,
}

fn unit() -> f64 {
    1.0
}

impl ChainConfig {
    pub fn load(path: &Path) -> Result<(VarChainSpec, usize), ConfigError> {
        let cfg: ChainConfig = read_json(path)?;
        cfg.resolve(path)
    }

    pub fn resolve(&self, path: &Path) -> Result<(VarChainSpec, usize), ConfigError> {
        check_version(path, self.version)?;
        if self.layers.is_empty() {
            return Err(ConfigError::EmptyChain {
                path: path.to_path_buf(),
            });
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let at = |name: &str| format!("layers[{i}].{name}");
            let activation = ActivationKind::parse(&l.activation)
                .map_err(|e| field(path, at("activation"), e))?;
            let method = ChainMethod::parse(&l.method).map_err(|e| field(path, at("method"), e))?;
            let weight_variance = match &l.weight_variance {
                WeightVariance::Value(v) => *v,
                WeightVariance::Init(rule) => {
                    let m = match rule.init.as_str() {
                        "ien" => rule.m,
                        "base" => 1,
                        other => {
                            return Err(field(
                                path,
                                at("weight_variance.init"),
                                format!("unknown rule {other:?}"),
                            ))
                        }
                    };
                    m as f64 / (activation.gain() * l.fan_in as f64)
                }
            };
            layers.push(ChainLayer {
                fan_in: l.fan_in,
                weight_variance,
                activation,
                method,
            });
        }
        let spec = VarChainSpec {
            input_variance: self.input_variance,
            layers,
        };
        if let Err(e) = spec.validate() {
            return Err(field(path, "layers", e));
        }
        let width = self
            .width
            .unwrap_or(spec.layers.last().map_or(0, |l| l.fan_in));
        Ok((spec, width))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        seed: u64,
        num_classes: usize,
        dims: usize,
        samples_per_class: usize,
        spread: f64,
        separation: f64,
    },
    /// Paths are relative to the config file.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub global_seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
}

/// An experiment config with every string resolved.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub global_seed: u64,
    pub data: SplitDataset,
    pub mlp: MlpConfig,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Experiment, ConfigError> {
        let cfg: ExperimentConfig = read_json(path)?;
        cfg.resolve(path)
    }

    pub fn resolve(&self, path: &Path) -> Result<Experiment, ConfigError> {
        check_version(path, self.version)?;
        let data = match &self.dataset {
            DatasetConfig::Blobs {
                seed,
                num_classes,
                dims,
                samples_per_class,
                spread,
                separation,
            } => {
                let blobs = BlobsConfig {
                    num_classes: *num_classes,
                    dims: *dims,
                    samples_per_class: *samples_per_class,
                    spread: *spread,
                    separation: *separation,
                };
                gen_blobs(&blobs, &SeededRng::new(*seed)).map_err(|e| field(path, "dataset", e))?
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let base = path.parent().unwrap_or(Path::new("."));
                let load = |i: &Path, l: &Path| {
                    crate::io::load_idx(&base.join(i), &base.join(l))
                        .map_err(|e| field(path, "dataset", e))
                };
                SplitDataset {
                    train: load(train_images, train_labels)?,
                    test: load(test_images, test_labels)?,
                }
            }
        };
        let input_dim: usize = data.train.sample_shape().iter().product();
        let mlp = MlpConfig {
            input_dim,
            hidden: self.model.hidden.clone(),
            classes: data.train.num_classes.max(data.test.num_classes),
            bias: self.model.bias,
        };
        let train = TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: 0,
        };
        train.validate().map_err(|e| field(path, "train", e))?;
        let methods = self
            .methods
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let method =
                    Method::parse(m).map_err(|e| field(path, format!("methods[{i}]"), e))?;
                mlp.layers(method).map_err(|e| field(path, "model", e))?;
                Ok(method)
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        if methods.is_empty() {
            return Err(field(path, "methods", "at least one method is required"));
        }
        if self.seeds.is_empty() {
            return Err(field(path, "seeds", "at least one seed is required"));
        }
        Ok(Experiment {
            global_seed: self.global_seed,
            data,
            mlp,
            train,
            methods,
            seeds: self.seeds.clone(),
        })
    }
}
