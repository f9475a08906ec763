//! Adversarial attacks: gradient-sign ℓ∞ attacks, CW-ℓ2, SPSA, the
//! sampling- and detector-aware attack, and substitute distillation.

mod batch;
mod cw;
mod linf;
mod spsa;
mod substitute;
mod wbs;

use deepbayes_tensor::{RngStream, Tape, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{DetectorCalibration, DetectorKind};
use crate::error::{Error, Result};
use crate::lvm::{Classifier, StoredModel};

pub use batch::{
    load_adversarial_batch, save_adversarial_batch, AdversarialBatch, CraftedSetting,
    DetectorOutcomes,
};
pub use cw::{cw_l2, cw_l2_traced, cw_learning_rate, CwTrace};
pub use linf::{fgsm, mim, mim_observed, pgd, pgd_observed};
pub use spsa::{spsa, spsa_gradient};
pub use substitute::{train_substitute, SubstituteConfig, SubstituteResult, ThreatMode};
pub use wbs::{wbs_detection_aware, wbs_detection_aware_observed, wbs_objective_on};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Mim,
    Cw,
    Spsa,
    /// PGD on frozen Monte-Carlo samples with an optional detector penalty.
    Wbs,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fgsm => "fgsm",
            Self::Pgd => "pgd",
            Self::Mim => "mim",
            Self::Cw => "cw",
            Self::Spsa => "spsa",
            Self::Wbs => "wbs",
        }
    }

    fn default_iterations(self) -> usize {
        match self {
            Self::Fgsm => 1,
            Self::Pgd | Self::Mim | Self::Wbs => 40,
            Self::Cw => 1000,
            Self::Spsa => 100,
        }
    }

    /// Whether the attack is bounded by an ℓ∞ budget.
    pub fn is_linf(self) -> bool {
        !matches!(self, Self::Cw)
    }
}

fn default_epsilon() -> f64 {
    0.3
}
fn default_c() -> f64 {
    1.0
}
fn default_step() -> f64 {
    0.01
}
fn default_decay() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_spsa_samples() -> usize {
    2000
}
fn default_spsa_delta() -> f64 {
    0.01
}
fn default_spsa_lr() -> f64 {
    0.01
}
fn default_spsa_stop() -> f64 {
    -5.0
}
fn default_samples() -> usize {
    10
}
fn default_box() -> [f64; 2] {
    [0.0, 1.0]
}

/// Hyperparameters of every attack; each attack reads the fields it uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// ℓ∞ budget.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// CW distortion/misclassification balance.
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_step")]
    pub step_size: f64,
    /// Defaults: 1 (FGSM), 40 (PGD, MIM, WB+S), 1000 (CW), 100 (SPSA).
    #[serde(default)]
    pub iterations: Option<usize>,
    /// MIM momentum decay μ.
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_true")]
    pub random_start: bool,
    /// CW Adam learning rate; by default chosen from `c`.
    #[serde(default)]
    pub cw_learning_rate: Option<f64>,
    #[serde(default)]
    pub confidence: f64,
    #[serde(default = "default_spsa_samples")]
    pub spsa_samples: usize,
    #[serde(default = "default_spsa_delta")]
    pub spsa_delta: f64,
    #[serde(default = "default_spsa_lr")]
    pub spsa_learning_rate: f64,
    #[serde(default = "default_spsa_stop")]
    pub spsa_stop: f64,
    #[serde(default)]
    pub lambda_detect: f64,
    /// Detector targeted by the hinge term of the WB+S attack.
    #[serde(default)]
    pub detector: Option<DetectorKind>,
    /// Monte-Carlo samples K per logit evaluation.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_box")]
    pub input_box: [f64; 2],
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            epsilon: default_epsilon(),
            c: default_c(),
            step_size: default_step(),
            iterations: None,
            decay: default_decay(),
            random_start: true,
            cw_learning_rate: None,
            confidence: 0.0,
            spsa_samples: default_spsa_samples(),
            spsa_delta: default_spsa_delta(),
            spsa_learning_rate: default_spsa_lr(),
            spsa_stop: default_spsa_stop(),
            lambda_detect: 0.0,
            detector: None,
            samples: default_samples(),
            input_box: default_box(),
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn iterations(&self) -> usize {
        self.iterations.unwrap_or(self.kind.default_iterations())
    }

    /// The configured sweep value: `c` for CW, ε otherwise.
    pub fn setting(&self) -> f64 {
        if self.kind == AttackKind::Cw {
            self.c
        } else {
            self.epsilon
        }
    }

    /// Copy with the sweep value replaced.
    pub fn at_setting(&self, value: f64) -> Self {
        let mut cfg = self.clone();
        if cfg.kind == AttackKind::Cw {
            cfg.c = value;
        } else {
            cfg.epsilon = value;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("{} attack: {m}", self.kind.name())));
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return fail("epsilon must be non-negative");
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return fail("step size must be positive");
        }
        if !(self.c.is_finite() && self.c >= 0.0) {
            return fail("c must be non-negative");
        }
        if self.samples == 0 {
            return fail("samples must be at least 1");
        }
        let [lo, hi] = self.input_box;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return fail("input box must satisfy lo < hi");
        }
        if self.kind == AttackKind::Spsa && (self.spsa_samples == 0 || self.spsa_delta <= 0.0) {
            return fail("SPSA needs positive samples and perturbation size");
        }
        if self.lambda_detect < 0.0 {
            return fail("lambda_detect must be non-negative");
        }
        if self.lambda_detect > 0.0 && self.detector.is_none() {
            return fail("a detector is required when lambda_detect > 0");
        }
        Ok(())
    }
}

/// Per-step callback receiving the iteration index and current iterate.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &Tensor);

/// Sum over rows of `−log softmax(logits)[y]`.
pub fn cross_entropy_on<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    Ok(logits.log_softmax()?.gather_last(labels)?.neg().sum())
}

/// Per-row `Z_y − max_{j≠y} Z_j`.
pub fn margin_on<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let own = logits.gather_last(labels)?;
    let other = logits.max_last_excluding(labels)?;
    Ok(own.sub(other)?)
}

/// Per-row margin `Z_y − max_{j≠y} Z_j` of plain logits.
pub fn margin(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            let best_other = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != y)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            row[y] - best_other
        })
        .collect()
}

/// Gradient of the cross-entropy at the true labels with respect to the
/// input, with fresh `samples`-sample logits.
pub fn cross_entropy_gradient(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    samples: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let logits = model.logits_on(&tape, xv, samples, rng)?;
    let loss = cross_entropy_on(logits, labels)?;
    if !loss.item()?.is_finite() {
        return Err(Error::NonFinite("attack loss".into()));
    }
    Ok(tape.backward(loss)?.wrt(xv))
}

/// Clamps `adv` into `[x − ε, x + ε] ∩ box` coordinatewise.
pub fn project_linf(adv: &mut Tensor, x: &Tensor, epsilon: f64, input_box: [f64; 2]) {
    for (a, &c) in adv.data_mut().iter_mut().zip(x.data()) {
        let lo = (c - epsilon).max(input_box[0]);
        let hi = (c + epsilon).min(input_box[1]);
        *a = a.max(lo).min(hi);
    }
}

fn check_inputs(model: &dyn Classifier, x: &Tensor, labels: &[usize]) -> Result<()> {
    crate::lvm::check_input(model, x)?;
    if x.shape()[0] != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} inputs but {} labels",
            x.shape()[0],
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= model.class_count()) {
        return Err(Error::InvalidArgument(format!("label {y} outside the model's classes")));
    }
    Ok(())
}

/// Runs the configured attack on a batch with a single stream.
/// Whether [`craft`] can run `cfg` against `model`.
pub fn supports(model: &StoredModel, cfg: &AttackConfig) -> bool {
    match (cfg.kind, model) {
        (AttackKind::Wbs, StoredModel::DeepBayes(m)) => {
            cfg.lambda_detect == 0.0
                || cfg.detector.is_some_and(|k| !k.needs_density() || m.has_density())
        }
        (AttackKind::Wbs, _) => false,
        _ => true,
    }
}

pub fn craft(
    model: &StoredModel,
    calib: Option<&DetectorCalibration>,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let clf = model.as_classifier();
    match cfg.kind {
        AttackKind::Fgsm => fgsm(clf, x, labels, cfg, rng),
        AttackKind::Pgd => pgd(clf, x, labels, cfg, rng),
        AttackKind::Mim => mim(clf, x, labels, cfg, rng),
        AttackKind::Cw => cw_l2(clf, x, labels, cfg, rng),
        AttackKind::Spsa => spsa(clf, x, labels, cfg, rng),
        AttackKind::Wbs => match model {
            StoredModel::DeepBayes(m) => wbs_detection_aware(m, calib, x, labels, cfg, rng),
            other => Err(Error::InvalidArgument(format!(
                "the sampling-aware attack needs a latent-variable model, not {}",
                other.describe()
            ))),
        },
    }
}

/// Runs the attack input by input, row `i` drawing from substream `i` of
/// `base`. Results are identical for any thread count.
pub fn craft_rows(
    model: &StoredModel,
    calib: Option<&DetectorCalibration>,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    base: &RngStream,
) -> Result<Tensor> {
    cfg.validate()?;
    check_inputs(model, x, labels)?;
    let d = x.shape()[1];
    let rows = (0..labels.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = base.substream(i as u64);
            let xi = x.select_rows(&[i])?;
            craft(model, calib, &xi, &labels[i..=i], cfg, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<f64> = rows.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(vec![labels.len(), d], data)?)
}
