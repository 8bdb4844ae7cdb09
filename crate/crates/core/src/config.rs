//! Experiment configuration files and the shipped presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackHyper, BaselineKind, StopCriteria};
use crate::defense::Defense;
use crate::error::{LabError, Result};
use crate::io::load_idx_dataset;
use crate::model::{LayerSpec, ModelParams, ModelSpec};
use crate::vfl::{partition_dataset, Dataset, Optimizer, PartitionScheme, Simulator, TrainConfig};

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Seeded smooth blob images.
    Synthetic {
        n: usize,
        height: usize,
        width: usize,
        classes: usize,
    },
    /// Unsigned-byte IDX image and label files (e.g. an MNIST subset).
    Idx {
        images: PathBuf,
        labels: PathBuf,
        n: usize,
        classes: usize,
    },
}

impl DataSpec {
    pub fn n(&self) -> usize {
        match self {
            Self::Synthetic { n, .. } | Self::Idx { n, .. } => *n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub extractor: Vec<LayerSpec>,
    pub d2: usize,
    #[serde(default = "one")]
    pub init_gain: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: Optimizer,
    pub rounds: usize,
    /// Batch size `K`.
    pub batch_size: usize,
    /// Whether the server applies updates (false: fixed parameters).
    pub train: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    CafeNested,
    CafeSingle,
    Dlg,
    Cosine,
    Sapag,
}

impl AttackMethod {
    pub fn name(&self) -> &'static str {
        match self {
            Self::CafeNested => "cafe-nested",
            Self::CafeSingle => "cafe-single",
            Self::Dlg => "dlg",
            Self::Cosine => "cosine",
            Self::Sapag => "sapag",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub method: AttackMethod,
    #[serde(default)]
    pub hyper: AttackHyper,
    #[serde(default)]
    pub stop: StopCriteria,
    /// TV weight of the cosine baseline.
    #[serde(default = "default_beta_tv")]
    pub beta_tv: f64,
    /// SAPAG kernel width; per-round median heuristic when absent.
    #[serde(default)]
    pub kernel_width: Option<f64>,
}

fn default_beta_tv() -> f64 {
    1e-4
}

impl AttackSection {
    pub fn baseline(&self) -> Option<BaselineKind> {
        match self.method {
            AttackMethod::Dlg => Some(BaselineKind::Dlg),
            AttackMethod::Cosine => Some(BaselineKind::CosineTv { beta_tv: self.beta_tv }),
            AttackMethod::Sapag => Some(BaselineKind::Sapag {
                kernel_width: self.kernel_width,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    pub n_max: usize,
    pub perturbation: f64,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            n_max: 12,
            perturbation: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    K,
    #[serde(rename = "alpha")]
    Alpha,
    #[serde(rename = "beta")]
    Beta,
    #[serde(rename = "gamma")]
    Gamma,
    #[serde(rename = "xi")]
    Xi,
    M,
    /// Training optimizer learning rate.
    #[serde(rename = "lr")]
    Lr,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "K" | "k" => Self::K,
            "alpha" => Self::Alpha,
            "beta" => Self::Beta,
            "gamma" => Self::Gamma,
            "xi" => Self::Xi,
            "M" | "m" => Self::M,
            "lr" => Self::Lr,
            other => {
                return Err(LabError::Config(format!(
                    "unknown sweep axis {other:?}; expected one of K, alpha, beta, gamma, xi, M, lr"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::K => "K",
            Self::Alpha => "alpha",
            Self::Beta => "beta",
            Self::Gamma => "gamma",
            Self::Xi => "xi",
            Self::M => "M",
            Self::Lr => "lr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// One experiment, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataSpec,
    /// Number of workers `M`.
    pub workers: usize,
    #[serde(default = "even")]
    pub partition: PartitionScheme,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    #[serde(default)]
    pub defense: Defense,
    #[serde(default)]
    pub theory: TheorySection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn even() -> PartitionScheme {
    PartitionScheme::Even
}

pub const PRESETS: &[(&str, &str)] = &[
    ("desk-cafe", include_str!("../presets/desk-cafe.toml")),
    ("desk-conv", include_str!("../presets/desk-conv.toml")),
    ("desk-dlg", include_str!("../presets/desk-dlg.toml")),
    ("desk-defense", include_str!("../presets/desk-defense.toml")),
    ("desk-training", include_str!("../presets/desk-training.toml")),
    ("theory-grid", include_str!("../presets/theory-grid.toml")),
];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            LabError::Config(format!("unknown preset {name:?}; available: {}", names.join(", ")))
        })?;
        Self::from_toml(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.data.n();
        if n == 0 {
            return Err(LabError::Config("dataset must hold at least one sample".into()));
        }
        if self.train.batch_size == 0 || self.train.batch_size > n {
            return Err(LabError::Config(format!(
                "batch size K = {} must satisfy 1 <= K <= N = {n}",
                self.train.batch_size
            )));
        }
        if self.workers == 0 {
            return Err(LabError::Config("need at least one worker".into()));
        }
        if self.model.d2 == 0 || !(self.model.init_gain > 0.0) {
            return Err(LabError::Config("model needs d2 >= 1 and a positive init_gain".into()));
        }
        if self.train.rounds == 0 {
            return Err(LabError::Config("train.rounds must be at least 1".into()));
        }
        self.attack.hyper.validate()?;
        self.attack.stop.validate()?;
        if let Some(b) = self.attack.baseline() {
            b.validate()?;
        }
        match &self.defense {
            Defense::None => {}
            Defense::Fake(c) => c.validate()?,
            Defense::Dp(c) => c.validate()?,
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(LabError::Config("sweep.values must not be empty".into()));
            }
        }
        Ok(())
    }

    /// Warnings that do not stop a run.
    pub fn advisories(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.data.n();
        if self.model.d2 <= n {
            out.push(format!(
                "d2 = {} is not larger than N = {n}: representation recovery is not guaranteed",
                self.model.d2
            ));
        }
        if self.train.batch_size == n {
            out.push(format!("K = N = {n}: per-sample gradients are not identifiable"));
        }
        out
    }

    pub fn data_seed(&self) -> u64 {
        self.seed
    }
    pub fn model_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
    pub fn round_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }
    pub fn attack_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSpec::Synthetic {
                n,
                height,
                width,
                classes,
            } => Dataset::synthetic_blobs(*n, *height, *width, *classes, self.data_seed()),
            DataSpec::Idx {
                images,
                labels,
                n,
                classes,
            } => {
                let ds = load_idx_dataset(images, labels, *classes, *n)?;
                if ds.len() < *n {
                    return Err(LabError::Config(format!(
                        "IDX files provide {} samples with label < {classes}, need {n}",
                        ds.len()
                    )));
                }
                Ok(ds)
            }
        }
    }

    /// Simulator in the configured regime, with the configured defense.
    pub fn simulator(&self) -> Result<Simulator> {
        self.simulator_with(self.defense)
    }

    pub fn simulator_with(&self, defense: Defense) -> Result<Simulator> {
        let dataset = self.dataset()?;
        let classes = dataset.classes;
        let features = dataset.features();
        let data = partition_dataset(dataset, self.workers, self.partition)?;
        let spec = ModelSpec::new(features, data.blocks.clone(), self.model.extractor.clone(), self.model.d2, classes)?;
        let params = ModelParams::init(spec, self.model_seed(), self.model.init_gain);
        let cfg = TrainConfig {
            optimizer: self.train.optimizer,
            rounds: self.train.rounds,
            seed: self.round_seed(),
            batch_size: self.train.batch_size,
            train: self.train.train,
        };
        Ok(Simulator::new(data, params, cfg)?.with_defense(defense))
    }

    /// Attack hyperparameters with the run-derived init seed.
    pub fn hyper(&self) -> AttackHyper {
        AttackHyper {
            init_seed: self.attack_seed(),
            ..self.attack.hyper.clone()
        }
    }

    /// Copy with one sweep axis set to `value`.
    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> Result<Self> {
        let mut c = self.clone();
        let as_count = |v: f64, what: &str| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(LabError::Config(format!("{what} sweep values must be positive integers, got {v}")))
            }
        };
        match axis {
            SweepAxis::K => c.train.batch_size = as_count(value, "K")?,
            SweepAxis::M => c.workers = as_count(value, "M")?,
            SweepAxis::Alpha => c.attack.hyper.alpha = value,
            SweepAxis::Beta => c.attack.hyper.beta = value,
            SweepAxis::Gamma => c.attack.hyper.gamma = value,
            SweepAxis::Xi => c.attack.hyper.xi = value,
            SweepAxis::Lr => {
                c.train.optimizer = match c.train.optimizer {
                    Optimizer::Sgd { .. } => Optimizer::Sgd { lr: value },
                    Optimizer::Adam { beta1, beta2, eps, .. } => Optimizer::Adam {
                        lr: value,
                        beta1,
                        beta2,
                        eps,
                    },
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}
