//! Victim accuracy, detection TP rates, minimum perturbation and transfer.

use std::collections::BTreeMap;

use deepbayes_tensor::{argmax, RngStream, Tensor};

use crate::attacks::{AdversarialBatch, CraftedSetting, DetectorOutcomes};
use crate::detection::{DetectorCalibration, DetectorKind};
use crate::error::{Error, Result};
use crate::lvm::{batched_logits, Classifier};

/// Metrics of one attack setting. Rates are `None` when undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct SettingMetrics {
    pub setting: f64,
    pub count: usize,
    pub successes: usize,
    pub victim_accuracy: Option<f64>,
    pub success_rate: Option<f64>,
    /// Fraction of successful crafted inputs each detector rejects.
    pub tp_rate: BTreeMap<DetectorKind, Option<f64>>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Predictions and detector outcomes for crafted inputs from one logit pass.
pub fn evaluate_crafted(
    model: &dyn Classifier,
    calib: Option<&DetectorCalibration>,
    labels: &[usize],
    crafted: Tensor,
    setting: f64,
    samples: usize,
    rng: &mut RngStream,
) -> Result<CraftedSetting> {
    let logits = batched_logits(model, &crafted, samples, rng)?;
    let predicted: Vec<usize> = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
    let success = predicted.iter().zip(labels).map(|(p, y)| p != y).collect();
    let mut detections = BTreeMap::new();
    if let Some(calib) = calib {
        for kind in calib.available_kinds() {
            let decisions = (0..logits.rows())
                .map(|i| calib.decide(kind, logits.row(i)))
                .collect::<Result<Vec<_>>>()?;
            detections.insert(
                kind,
                DetectorOutcomes {
                    statistics: decisions.iter().map(|d| d.statistic).collect(),
                    accepted: decisions.iter().map(|d| d.accepted).collect(),
                },
            );
        }
    }
    Ok(CraftedSetting {
        setting,
        crafted,
        predicted,
        success,
        detections,
    })
}

/// Victim accuracy, success rate and per-detector TP rate from recorded
/// predictions and detections.
pub fn summarize_setting(setting: &CraftedSetting) -> SettingMetrics {
    let count = setting.success.len();
    let successes = setting.success.iter().filter(|s| **s).count();
    let tp_rate = setting
        .detections
        .iter()
        .map(|(kind, out)| {
            let rejected = setting
                .success
                .iter()
                .zip(&out.accepted)
                .filter(|(s, a)| **s && !**a)
                .count();
            (*kind, ratio(rejected, successes))
        })
        .collect();
    SettingMetrics {
        setting: setting.setting,
        count,
        successes,
        victim_accuracy: ratio(count - successes, count),
        success_rate: ratio(successes, count),
        tp_rate,
    }
}

/// Metrics for every setting of a batch.
pub fn run_attack_eval(batch: &AdversarialBatch) -> Vec<SettingMetrics> {
    batch.settings.iter().map(summarize_setting).collect()
}

/// Per-input minimum perturbation over a budget grid and its mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MinPerturbation {
    pub per_input: Vec<f64>,
    pub mean: f64,
}

/// Smallest budget at which each input was successfully attacked, or
/// `max(grid) + 0.1` when no budget succeeded. `success[s][i]` is the flag
/// of input `i` at `grid[s]`.
pub fn min_perturbation(success: &[Vec<bool>], grid: &[f64]) -> Result<MinPerturbation> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty perturbation grid".into()));
    }
    if success.len() != grid.len() {
        return Err(Error::InvalidArgument(format!(
            "{} success rows for {} grid values",
            success.len(),
            grid.len()
        )));
    }
    let n = success[0].len();
    if success.iter().any(|row| row.len() != n) {
        return Err(Error::InvalidArgument("ragged success flags".into()));
    }
    let fallback = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 0.1;
    let per_input: Vec<f64> = (0..n)
        .map(|i| {
            grid.iter()
                .zip(success)
                .filter(|(_, row)| row[i])
                .map(|(e, _)| *e)
                .fold(fallback, f64::min)
        })
        .collect();
    let mean = if n == 0 {
        f64::NAN
    } else {
        per_input.iter().sum::<f64>() / n as f64
    };
    Ok(MinPerturbation { per_input, mean })
}

/// Metrics of source-successful crafted inputs replayed on a target model.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMetrics {
    pub setting: f64,
    /// Source-successful inputs sent to the target.
    pub transferred: usize,
    pub metrics: SettingMetrics,
}

/// Replays the source-successful inputs of every setting on `target`.
pub fn transfer_eval(
    batch: &AdversarialBatch,
    target: &dyn Classifier,
    calib: Option<&DetectorCalibration>,
    samples: usize,
    rng: &mut RngStream,
) -> Result<Vec<TransferMetrics>> {
    let d = batch.clean.shape().get(1).copied().unwrap_or(0);
    if d != target.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "batch inputs have dimension {d} but {} expects {}",
            target.describe(),
            target.input_dim()
        )));
    }
    batch
        .settings
        .iter()
        .map(|s| {
            let rows: Vec<usize> = (0..s.success.len()).filter(|&i| s.success[i]).collect();
            let mut stream = rng.fork();
            let labels: Vec<usize> = rows.iter().map(|&i| batch.labels[i]).collect();
            let crafted = s.crafted.select_rows(&rows)?;
            let evaluated =
                evaluate_crafted(target, calib, &labels, crafted, s.setting, samples, &mut stream)?;
            Ok(TransferMetrics {
                setting: s.setting,
                transferred: rows.len(),
                metrics: summarize_setting(&evaluated),
            })
        })
        .collect()
}
