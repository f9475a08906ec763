//! Model checkpoints: a JSON manifest with the configuration, seed and an
//! optional detector calibration, plus the parameter blob.

use std::path::Path;

use deepbayes_tensor::{RngStream, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};


use super::bnn::{BnnConfig, MlpClassifier};
use super::model::{DeepBayesModel, ModelConfig};
use super::two_rings::{TwoRingsClassifier, TwoRingsSpec};
use super::Classifier;
use crate::detection::DetectorCalibration;
use crate::error::{Error, Result};
use crate::store::{read_bundle, write_bundle};

const KIND: &str = "checkpoint";

/// Any model the harness can persist.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredModel {
    DeepBayes(DeepBayesModel),
    Mlp(MlpClassifier),
    TwoRings(TwoRingsClassifier),
}

impl StoredModel {
    pub fn as_classifier(&self) -> &dyn Classifier {
        match self {
            Self::DeepBayes(m) => m,
            Self::Mlp(m) => m,
            Self::TwoRings(m) => m,
        }
    }
}

impl Classifier for StoredModel {
    fn input_dim(&self) -> usize {
        self.as_classifier().input_dim()
    }

    fn class_count(&self) -> usize {
        self.as_classifier().class_count()
    }

    fn has_density(&self) -> bool {
        self.as_classifier().has_density()
    }

    fn describe(&self) -> String {
        self.as_classifier().describe()
    }

    fn logits_on<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        samples: usize,
        rng: &mut RngStream,
    ) -> Result<Var<'t>> {
        match self {
            Self::DeepBayes(m) => m.logits_on(tape, x, samples, rng),
            Self::Mlp(m) => m.logits_on(tape, x, samples, rng),
            Self::TwoRings(m) => m.logits_on(tape, x, samples, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: StoredModel,
    pub seed: u64,
    pub calibration: Option<DetectorCalibration>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "model_kind", rename_all = "snake_case")]
enum Meta {
    DeepBayes {
        factorization: String,
        config: ModelConfig,
        log_class_priors: Vec<f64>,
        seed: u64,
        calibration: Option<DetectorCalibration>,
    },
    Mlp {
        config: BnnConfig,
        seed: u64,
        calibration: Option<DetectorCalibration>,
    },
    TwoRings {
        spec: TwoRingsSpec,
        seed: u64,
        calibration: Option<DetectorCalibration>,
    },
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let calibration = ckpt.calibration.clone();
    let seed = ckpt.seed;
    let (meta, names, params): (Meta, &[String], &[Tensor]) = match &ckpt.model {
        StoredModel::DeepBayes(m) => (
            Meta::DeepBayes {
                factorization: m.factorization().tag().to_string(),
                config: m.config().clone(),
                log_class_priors: m.log_class_priors().to_vec(),
                seed,
                calibration,
            },
            m.param_names(),
            m.params(),
        ),
        StoredModel::Mlp(m) => (
            Meta::Mlp {
                config: m.config().clone(),
                seed,
                calibration,
            },
            m.param_names(),
            m.params(),
        ),
        StoredModel::TwoRings(m) => (
            Meta::TwoRings {
                spec: m.spec.clone(),
                seed,
                calibration,
            },
            &[],
            &[],
        ),
    };
    let tensors: Vec<(String, &Tensor)> = names.iter().cloned().zip(params.iter()).collect();
    write_bundle(path, KIND, serde_json::to_value(meta)?, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bundle = read_bundle(path)?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bundle.kind != KIND {
        return Err(bad(format!("expected a {KIND}, found {}", bundle.kind)));
    }
    let meta: Meta = serde_json::from_value(bundle.meta.clone()).map_err(|e| bad(e.to_string()))?;
    let params: Vec<Tensor> = bundle.tensors.into_iter().map(|(_, t)| t).collect();
    let wrap = |e: Error| bad(e.to_string());
    Ok(match meta {
        Meta::DeepBayes {
            factorization,
            config,
            log_class_priors,
            seed,
            calibration,
        } => {
            if factorization != config.factorization.tag() {
                return Err(bad(format!(
                    "factorization {factorization} disagrees with config {}",
                    config.factorization
                )));
            }
            Checkpoint {
                model: StoredModel::DeepBayes(
                    DeepBayesModel::from_parts(config, params, log_class_priors).map_err(wrap)?,
                ),
                seed,
                calibration,
            }
        }
        Meta::Mlp {
            config,
            seed,
            calibration,
        } => Checkpoint {
            model: StoredModel::Mlp(MlpClassifier::from_parts(config, params).map_err(wrap)?),
            seed,
            calibration,
        },
        Meta::TwoRings {
            spec,
            seed,
            calibration,
        } => Checkpoint {
            model: StoredModel::TwoRings(TwoRingsClassifier::new(spec).map_err(wrap)?),
            seed,
            calibration,
        },
    })
}
