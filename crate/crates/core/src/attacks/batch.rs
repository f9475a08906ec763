use std::collections::BTreeMap;
use std::path::Path;

use deepbayes_tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::AttackConfig;
use crate::detection::DetectorKind;
use crate::error::{Error, Result};
use crate::store::{read_bundle, write_bundle};

const KIND: &str = "adversarial_batch";

/// Crafted inputs for one sweep value (ε or c).
#[derive(Debug, Clone, PartialEq)]
pub struct CraftedSetting {
    pub setting: f64,
    pub crafted: Tensor,
    pub predicted: Vec<usize>,
    /// `predicted[i] != labels[i]`.
    pub success: Vec<bool>,
    /// Detector statistic and acceptance for every crafted input.
    pub detections: BTreeMap<DetectorKind, DetectorOutcomes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutcomes {
    pub statistics: Vec<f64>,
    pub accepted: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub source_model: String,
    pub attack: AttackConfig,
    pub seed: u64,
    pub clean: Tensor,
    pub labels: Vec<usize>,
    pub settings: Vec<CraftedSetting>,
}

impl AdversarialBatch {
    /// Checks shapes and that every crafted input lies in the box (and the
    /// ε-ball for ℓ∞ attacks).
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.clean.ndim() != 2 || self.clean.shape()[0] != n {
            return Err(Error::InvalidArgument(format!(
                "clean inputs {:?} for {n} labels",
                self.clean.shape()
            )));
        }
        let [lo, hi] = self.attack.input_box;
        for s in &self.settings {
            if s.crafted.shape() != self.clean.shape()
                || s.predicted.len() != n
                || s.success.len() != n
            {
                return Err(Error::InvalidArgument(format!(
                    "setting {} does not match the clean batch",
                    s.setting
                )));
            }
            for (a, c) in s.crafted.data().iter().zip(self.clean.data()) {
                let outside = *a < lo || *a > hi;
                let too_far = self.attack.kind.is_linf() && (a - c).abs() > s.setting + 1e-9;
                if outside || too_far {
                    return Err(Error::InvalidArgument(format!(
                        "crafted value {a} violates the constraints of setting {}",
                        s.setting
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SettingMeta {
    setting: f64,
    predicted: Vec<usize>,
    success: Vec<bool>,
    detections: BTreeMap<DetectorKind, DetectorOutcomes>,
}

pub fn save_adversarial_batch(path: &Path, batch: &AdversarialBatch) -> Result<()> {
    batch.validate()?;
    let settings: Vec<SettingMeta> = batch
        .settings
        .iter()
        .map(|s| SettingMeta {
            setting: s.setting,
            predicted: s.predicted.clone(),
            success: s.success.clone(),
            detections: s.detections.clone(),
        })
        .collect();
    let meta = json!({
        "source_model": batch.source_model,
        "attack": batch.attack,
        "seed": batch.seed,
        "labels": batch.labels,
        "settings": settings,
    });
    let names: Vec<String> = (0..batch.settings.len())
        .map(|i| format!("crafted.{i}"))
        .collect();
    let mut tensors: Vec<(String, &Tensor)> = vec![("clean".to_string(), &batch.clean)];
    for (name, s) in names.into_iter().zip(&batch.settings) {
        tensors.push((name, &s.crafted));
    }
    write_bundle(path, KIND, meta, &tensors)
}

pub fn load_adversarial_batch(path: &Path) -> Result<AdversarialBatch> {
    let bundle = read_bundle(path)?;
    if bundle.kind != KIND {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected an adversarial batch, found {}", bundle.kind),
        });
    }
    let field = |name: &str| {
        bundle.meta.get(name).cloned().ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("missing {name}"),
        })
    };
    let source_model: String = serde_json::from_value(field("source_model")?)?;
    let attack: AttackConfig = serde_json::from_value(field("attack")?)?;
    let seed: u64 = serde_json::from_value(field("seed")?)?;
    let labels: Vec<usize> = serde_json::from_value(field("labels")?)?;
    let metas: Vec<SettingMeta> = serde_json::from_value(field("settings")?)?;
    let tensor = |name: &str| {
        bundle.tensor(name).cloned().ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("missing tensor {name}"),
        })
    };
    let clean = tensor("clean")?;
    let settings = metas
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            Ok(CraftedSetting {
                setting: m.setting,
                crafted: tensor(&format!("crafted.{i}"))?,
                predicted: m.predicted,
                success: m.success,
                detections: m.detections,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = AdversarialBatch {
        source_model,
        attack,
        seed,
        clean,
        labels,
        settings,
    };
    batch.validate().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(batch)
}
