//! JSON experiment configuration.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, SubstituteConfig};
use crate::detection::CalibrationMode;
use crate::error::{Error, Result};
use crate::lvm::{Activation, Factorization, TrainOptions, TwoRingsSpec};

pub const SCHEMA_VERSION: u32 = 1;

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}
fn default_latent() -> usize {
    64
}
fn default_obs_variance() -> f64 {
    1.0
}
fn default_dropout() -> f64 {
    0.3
}
fn default_multiplier() -> usize {
    2
}
fn default_per_class() -> usize {
    1000
}
fn default_test_per_class() -> usize {
    500
}
fn default_true() -> bool {
    true
}
fn default_detection() -> CalibrationMode {
    CalibrationMode::TargetFpr { rate: 0.05 }
}
fn default_samples() -> usize {
    10
}
fn default_attack_inputs() -> usize {
    100
}

/// Where training and test data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoRings {
        #[serde(default)]
        spec: TwoRingsSpec,
        #[serde(default = "default_per_class")]
        n_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        /// Map both rings into the unit box before training.
        #[serde(default = "default_true")]
        normalize: bool,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep two classes, relabelled 0 and 1.
        #[serde(default)]
        classes: Option<[usize; 2]>,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Features {
        train: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    DeepBayes {
        factorization: Factorization,
        #[serde(default = "default_latent")]
        latent_dim: usize,
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
        #[serde(default = "default_obs_variance")]
        obs_variance: f64,
    },
    /// Monte-Carlo dropout network.
    Bnn {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_multiplier")]
        width_multiplier: usize,
        #[serde(default = "default_dropout")]
        dropout: f64,
        #[serde(default)]
        activation: Activation,
    },
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
    /// The analytic ring-projection classifier (two-rings data only).
    TwoRings,
}

impl ModelSpec {
    pub fn default_name(&self) -> String {
        match self {
            Self::DeepBayes { factorization, .. } => factorization.tag().to_string(),
            Self::Bnn { .. } => "BNN".into(),
            Self::Mlp { .. } => "MLP".into(),
            Self::TwoRings => "two-rings".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    #[serde(default)]
    pub name: Option<String>,
    pub model: ModelSpec,
    /// Overrides the experiment-wide schedule.
    #[serde(default)]
    pub training: Option<TrainOptions>,
}

impl ModelEntry {
    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.model.default_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    #[serde(default)]
    pub name: Option<String>,
    pub attack: AttackConfig,
    /// Sweep of ε (or c for CW); empty means the configured value only.
    #[serde(default)]
    pub grid: Vec<f64>,
    /// Craft on a substitute distilled from the victim instead of the
    /// victim itself.
    #[serde(default)]
    pub substitute: Option<SubstituteConfig>,
}

impl AttackEntry {
    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.attack.kind.name().to_string())
    }

    pub fn settings(&self) -> Vec<f64> {
        if self.grid.is_empty() {
            vec![self.attack.setting()]
        } else {
            self.grid.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    pub models: Vec<ModelEntry>,
    pub training: TrainOptions,
    #[serde(default)]
    pub attacks: Vec<AttackEntry>,
    #[serde(default = "default_detection")]
    pub detection: CalibrationMode,
    /// Monte-Carlo samples K for prediction, calibration and evaluation.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Leading test inputs attacked per cell.
    #[serde(default = "default_attack_inputs")]
    pub attack_inputs: usize,
    /// Replay every batch on every other model.
    #[serde(default)]
    pub transfer: bool,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '+'))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.models.is_empty() {
            return fail("at least one model is required".into());
        }
        if self.samples == 0 {
            return fail("samples must be at least 1".into());
        }
        let mut seen = HashSet::new();
        for m in &self.models {
            let name = m.name();
            if !valid_name(&name) {
                return fail(format!("model name {name:?} must be alphanumeric, '-', '_', '.' or '+'"));
            }
            if !seen.insert(name.clone()) {
                return fail(format!("duplicate model name {name}"));
            }
            if m.model == ModelSpec::TwoRings && !matches!(self.dataset, DatasetSpec::TwoRings { .. }) {
                return fail("the analytic two-rings model needs two-rings data".into());
            }
        }
        let mut seen = HashSet::new();
        for a in &self.attacks {
            let name = a.name();
            if !valid_name(&name) {
                return fail(format!("attack name {name:?} must be alphanumeric, '-', '_', '.' or '+'"));
            }
            if !seen.insert(name.clone()) {
                return fail(format!("duplicate attack name {name}"));
            }
            if a.grid.windows(2).any(|w| w[1] <= w[0]) {
                return fail(format!("grid of attack {name} must be strictly increasing"));
            }
            for s in a.settings() {
                a.attack.at_setting(s).validate()?;
            }
            if let Some(sub) = &a.substitute {
                sub.validate()?;
            }
        }
        if let DatasetSpec::TwoRings {
            spec,
            n_per_class,
            test_per_class,
            ..
        } = &self.dataset
        {
            spec.validate()?;
            if *n_per_class == 0 || *test_per_class == 0 {
                return fail("two-rings class counts must be positive".into());
            }
        }
        Ok(())
    }
}
