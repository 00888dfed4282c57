//! Run configuration: stage, loss weights, sampling strategies, optimizer,
//! schedule, and augmentation. Mirrored one-to-one by the JSON config file;
//! unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::AugConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::nn::OptimizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    BootstrapTeacher,
    Ediy,
}

/// Counterpart selection strategy for the diversity term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RdemSampling {
    /// Teacher-guided most-dissimilar ranking.
    #[serde(rename = "TG")]
    Tg,
    /// Uniform random same-view region.
    #[serde(rename = "R")]
    Random,
    /// Random other-image global feature.
    #[serde(rename = "R_INS")]
    RandomInstance,
}

/// Counterpart selection strategy for the invariance term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiemSampling {
    #[serde(rename = "TG")]
    Tg,
    #[serde(rename = "R")]
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub rdem: RdemSampling,
    pub riem: RiemSampling,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            rdem: RdemSampling::Tg,
            riem: RiemSampling::Tg,
        }
    }
}

fn default_tau() -> f64 {
    0.99
}
fn default_batch() -> usize {
    64
}
fn default_accumulation() -> usize {
    1
}
fn default_epochs() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_accumulation")]
    pub accumulation_steps: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Hard cap on optimizer steps; `null` runs the full epoch budget.
    #[serde(default)]
    pub max_steps: Option<u64>,
    pub seed: u64,
    #[serde(default)]
    pub aug: AugConfig,
    pub data_dir: PathBuf,
    /// Teacher checkpoint; required when any teacher-guided sampling is
    /// active with a nonzero region loss weight.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    /// Run batch norm from running statistics even while training. Exists
    /// for the gradient-accumulation equivalence check, where training-mode
    /// statistics would differ across micro-batches.
    #[serde(default)]
    pub bn_eval: bool,
    #[serde(default)]
    pub model: ModelConfig,
}

impl TrainConfig {
    /// A minimal configuration for the given stage, seed and dataset.
    pub fn new(stage: Stage, seed: u64, data_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            stage,
            weights: LossWeights::default(),
            sampling: SamplingConfig::default(),
            tau: default_tau(),
            optimizer: OptimizerConfig::default(),
            batch_size: default_batch(),
            accumulation_steps: default_accumulation(),
            epochs: if stage == Stage::BootstrapTeacher { 10 } else { default_epochs() },
            max_steps: None,
            seed,
            aug: AugConfig::default(),
            data_dir: data_dir.into(),
            teacher: None,
            bn_eval: false,
            model: ModelConfig::default(),
        }
    }

    pub fn needs_rdem(&self) -> bool {
        self.weights.lambda1 > 0.0
    }

    pub fn needs_riem(&self) -> bool {
        self.weights.lambda2 > 0.0
    }

    pub fn needs_byol(&self) -> bool {
        self.weights.lambda3 > 0.0
    }

    pub fn needs_teacher(&self) -> bool {
        (self.needs_rdem() && self.sampling.rdem == RdemSampling::Tg)
            || (self.needs_riem() && self.sampling.riem == RiemSampling::Tg)
    }

    /// Checks invariants and applies stage rules (the bootstrap stage always
    /// trains with weights (0, 0, 1)).
    pub fn validated(mut self) -> Result<Self> {
        if self.stage == Stage::BootstrapTeacher {
            self.weights = LossWeights::new(0.0, 0.0, 1.0);
        }
        self.weights.validate()?;
        self.aug.validate()?;
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau = {} outside [0,1]", self.tau)));
        }
        if self.accumulation_steps == 0 {
            return Err(Error::Config("accumulation_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.batch_size % self.accumulation_steps != 0 {
            return Err(Error::Config(format!(
                "batch_size {} is not divisible by accumulation_steps {}",
                self.batch_size, self.accumulation_steps
            )));
        }
        if self.needs_teacher() && self.teacher.is_none() {
            return Err(Error::Config(
                "teacher-guided sampling requires a teacher checkpoint path".into(),
            ));
        }
        if !self.needs_byol() && !self.needs_rdem() && !self.needs_riem() {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        // the region grid must exist for the configured view size
        self.model
            .encoder
            .grid(self.aug.output_size, self.aug.output_size)?;
        Ok(self)
    }

    /// SHA-256 over the canonical JSON form; any field change changes it.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validated()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
