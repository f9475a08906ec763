//! Rejection of inputs by low density, low class-joint density, or by a
//! posterior far from the class-mean posterior seen in training.

use deepbayes_tensor::{argmax, log_sum_exp, softmax, RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lvm::{batched_logits, Classifier};

/// Posterior entries below this are raised to it inside KL.
pub const POSTERIOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CalibrationMode {
    /// `δ = mean + α·std` of the training statistic.
    Alpha { alpha: f64 },
    /// Reject exactly `⌈rate·N⌉` of the `N` training statistics.
    TargetFpr { rate: f64 },
}

impl CalibrationMode {
    fn validate(self) -> Result<()> {
        match self {
            Self::Alpha { alpha } if alpha.is_finite() => Ok(()),
            Self::TargetFpr { rate } if (0.0..=1.0).contains(&rate) => Ok(()),
            other => Err(Error::Config(format!("invalid calibration mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Marginal,
    Logit,
    Kl,
    Tv,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [Self::Marginal, Self::Logit, Self::Kl, Self::Tv];

    pub fn name(self) -> &'static str {
        match self {
            Self::Marginal => "marginal",
            Self::Logit => "logit",
            Self::Kl => "kl",
            Self::Tv => "tv",
        }
    }

    pub fn needs_density(self) -> bool {
        matches!(self, Self::Marginal | Self::Logit)
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown detector {s:?}")))
    }
}

/// Training-set summary of one statistic and the threshold derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatSummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub threshold: f64,
    pub count: usize,
}

impl StatSummary {
    pub fn fit(values: &[f64], mode: CalibrationMode) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no statistics to calibrate on".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("calibration statistic {v}")));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        let threshold = match mode {
            CalibrationMode::Alpha { alpha } => mean + alpha * std,
            CalibrationMode::TargetFpr { rate } => fpr_threshold(values, rate),
        };
        Ok(Self {
            mean,
            std,
            threshold,
            count: n,
        })
    }
}

/// Number of training points a target false-positive rate rejects.
pub fn rejected_count(n: usize, rate: f64) -> usize {
    ((rate * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Threshold rejecting the `⌈rate·N⌉` largest values under `Φ > δ`: the
/// `(N − m)`-th smallest value.
pub fn fpr_threshold(values: &[f64], rate: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let m = rejected_count(n, rate);
    if m == n {
        sorted[0] - (sorted[0].abs() + 1.0)
    } else {
        sorted[n - m - 1]
    }
}

/// Per-class mean posteriors and the divergence statistics around them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCalibration {
    pub mean_probs: Vec<Vec<f64>>,
    pub kl: Vec<StatSummary>,
    pub tv: Vec<StatSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorCalibration {
    pub mode: CalibrationMode,
    /// Importance samples used for the statistics.
    pub samples: usize,
    pub class_count: usize,
    /// Statistic `−log p(x)`; absent for models without a density.
    pub marginal: Option<StatSummary>,
    /// Per class `c`, statistic `−log p(x, y_c)` over training points of
    /// class `c`; absent for models without a density.
    pub logit: Option<Vec<StatSummary>>,
    pub divergence: DivergenceCalibration,
}

/// One detector's verdict on one input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionDecision {
    pub kind: DetectorKind,
    pub statistic: f64,
    pub threshold: f64,
    pub accepted: bool,
}

impl DetectionDecision {
    pub fn new(kind: DetectorKind, statistic: f64, threshold: f64) -> Self {
        Self {
            kind,
            statistic,
            threshold,
            accepted: statistic <= threshold,
        }
    }

    pub fn rejected(&self) -> bool {
        !self.accepted
    }
}

pub fn marginal_statistic(logits: &[f64]) -> f64 {
    -log_sum_exp(logits)
}

pub fn logit_statistic(logits: &[f64], class: usize) -> f64 {
    -logits[class]
}

/// `Σ_i p_i log(p_i / q_i)` with `0·log 0 = 0` and `q` floored at
/// [`POSTERIOR_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(POSTERIOR_FLOOR)).ln())
        .sum()
}

/// `½ Σ_i |p_i − q_i|` with `q` floored at [`POSTERIOR_FLOOR`].
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p
        .iter()
        .zip(q)
        .map(|(a, b)| (a - b.max(POSTERIOR_FLOOR)).abs())
        .sum::<f64>()
}

impl DetectorCalibration {
    fn summary(&self, kind: DetectorKind, class: usize) -> Result<&StatSummary> {
        let missing = || Error::DensityUnavailable(format!("{} detection", kind.name()));
        match kind {
            DetectorKind::Marginal => self.marginal.as_ref().ok_or_else(missing),
            DetectorKind::Logit => self
                .logit
                .as_ref()
                .ok_or_else(missing)
                .map(|v| &v[class]),
            DetectorKind::Kl => Ok(&self.divergence.kl[class]),
            DetectorKind::Tv => Ok(&self.divergence.tv[class]),
        }
    }

    pub fn available(&self, kind: DetectorKind) -> bool {
        !kind.needs_density() || self.marginal.is_some()
    }

    pub fn available_kinds(&self) -> Vec<DetectorKind> {
        DetectorKind::ALL
            .into_iter()
            .filter(|k| self.available(*k))
            .collect()
    }

    /// Decision of detector `kind` for a row of frozen logits. The class is
    /// the argmax prediction.
    pub fn decide(&self, kind: DetectorKind, logits: &[f64]) -> Result<DetectionDecision> {
        self.decide_as(kind, logits, argmax(logits))
    }

    /// As [`decide`](Self::decide) but evaluating the statistic and
    /// threshold at `class` rather than at the prediction.
    pub fn decide_as(
        &self,
        kind: DetectorKind,
        logits: &[f64],
        class: usize,
    ) -> Result<DetectionDecision> {
        if logits.len() != self.class_count || class >= self.class_count {
            return Err(Error::InvalidArgument(format!(
                "calibration for {} classes applied to {} logits (class {class})",
                self.class_count,
                logits.len()
            )));
        }
        let summary = self.summary(kind, class)?;
        let stat = self.statistic(kind, logits, class);
        Ok(DetectionDecision::new(kind, stat, summary.threshold))
    }

    /// Statistic Φ of `kind` for a logit row evaluated at `class`.
    pub fn statistic(&self, kind: DetectorKind, logits: &[f64], class: usize) -> f64 {
        match kind {
            DetectorKind::Marginal => marginal_statistic(logits),
            DetectorKind::Logit => logit_statistic(logits, class),
            DetectorKind::Kl => kl_divergence(&self.divergence.mean_probs[class], &softmax(logits)),
            DetectorKind::Tv => tv_distance(&self.divergence.mean_probs[class], &softmax(logits)),
        }
    }

    /// Threshold of `kind` at `class`.
    pub fn threshold(&self, kind: DetectorKind, class: usize) -> Result<f64> {
        Ok(self.summary(kind, class)?.threshold)
    }
}

/// Computes every statistic over the training set from `samples`-sample
/// logits and fits thresholds. Density statistics are skipped for models
/// without a density; every class must be present.
pub fn calibrate(
    model: &dyn Classifier,
    data: &Dataset,
    mode: CalibrationMode,
    samples: usize,
    rng: &mut RngStream,
) -> Result<DetectorCalibration> {
    mode.validate()?;
    let logits = batched_logits(model, data.inputs(), samples, rng)?;
    calibrate_from_logits(&logits, data.labels(), model.has_density(), mode, samples)
}

/// Calibration from precomputed `[N, C]` logits with true labels.
pub fn calibrate_from_logits(
    logits: &Tensor,
    labels: &[usize],
    has_density: bool,
    mode: CalibrationMode,
    samples: usize,
) -> Result<DetectorCalibration> {
    mode.validate()?;
    let c = logits.last_dim();
    let n = labels.len();
    if logits.rows() != n || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} logit rows for {n} labels",
            logits.rows()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{c}")));
        }
        by_class[l].push(i);
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!(
            "class {empty} has no calibration points"
        )));
    }
    let posts: Vec<Vec<f64>> = (0..n).map(|i| softmax(logits.row(i))).collect();

    let (marginal, logit) = if has_density {
        let stats: Vec<f64> = (0..n).map(|i| marginal_statistic(logits.row(i))).collect();
        let per_class = (0..c)
            .map(|k| {
                let v: Vec<f64> = by_class[k]
                    .iter()
                    .map(|&i| logit_statistic(logits.row(i), k))
                    .collect();
                StatSummary::fit(&v, mode)
            })
            .collect::<Result<Vec<_>>>()?;
        (Some(StatSummary::fit(&stats, mode)?), Some(per_class))
    } else {
        (None, None)
    };

    let mut mean_probs = Vec::with_capacity(c);
    let mut kl = Vec::with_capacity(c);
    let mut tv = Vec::with_capacity(c);
    for rows in &by_class {
        let mut p = vec![0.0; c];
        for &i in rows {
            for (acc, v) in p.iter_mut().zip(&posts[i]) {
                *acc += v;
            }
        }
        for v in &mut p {
            *v /= rows.len() as f64;
        }
        let kls: Vec<f64> = rows.iter().map(|&i| kl_divergence(&p, &posts[i])).collect();
        let tvs: Vec<f64> = rows.iter().map(|&i| tv_distance(&p, &posts[i])).collect();
        kl.push(StatSummary::fit(&kls, mode)?);
        tv.push(StatSummary::fit(&tvs, mode)?);
        mean_probs.push(p);
    }
    Ok(DetectorCalibration {
        mode,
        samples,
        class_count: c,
        marginal,
        logit,
        divergence: DivergenceCalibration { mean_probs, kl, tv },
    })
}

fn detect(
    calib: &DetectorCalibration,
    model: &dyn Classifier,
    x: &Tensor,
    kind: DetectorKind,
    rng: &mut RngStream,
) -> Result<Vec<DetectionDecision>> {
    if kind.needs_density() && !model.has_density() {
        return Err(Error::DensityUnavailable(model.describe()));
    }
    let logits = batched_logits(model, x, calib.samples, rng)?;
    (0..logits.rows())
        .map(|i| calib.decide(kind, logits.row(i)))
        .collect()
}

/// Rejects when `−log p(x) > δ`.
pub fn detect_marginal(
    calib: &DetectorCalibration,
    model: &dyn Classifier,
    x: &Tensor,
    rng: &mut RngStream,
) -> Result<Vec<DetectionDecision>> {
    detect(calib, model, x, DetectorKind::Marginal, rng)
}

/// Rejects when `−log p(x, F(x)) > δ_{F(x)}`.
pub fn detect_logit(
    calib: &DetectorCalibration,
    model: &dyn Classifier,
    x: &Tensor,
    rng: &mut RngStream,
) -> Result<Vec<DetectionDecision>> {
    detect(calib, model, x, DetectorKind::Logit, rng)
}

/// Rejects when the posterior is far (KL or TV) from the mean training
/// posterior of the predicted class.
pub fn detect_divergence(
    calib: &DetectorCalibration,
    model: &dyn Classifier,
    x: &Tensor,
    kind: DetectorKind,
    rng: &mut RngStream,
) -> Result<Vec<DetectionDecision>> {
    if kind.needs_density() {
        return Err(Error::InvalidArgument(format!(
            "{} is not a divergence detector",
            kind.name()
        )));
    }
    detect(calib, model, x, kind, rng)
}
