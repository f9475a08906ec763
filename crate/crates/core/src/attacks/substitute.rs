use deepbayes_tensor::{RngStream, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lvm::{
    batched_logits, check_input, BnnConfig, Classifier, MlpClassifier, Prediction, TrainOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreatMode {
    /// The victim's probability vectors are observed.
    Grey,
    /// Only the victim's predicted labels are observed.
    Black,
}

fn default_seed_size() -> usize {
    2000
}
fn default_loops() -> usize {
    6
}
fn default_lambda() -> f64 {
    0.1
}
fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}
fn default_epochs() -> usize {
    10
}
fn default_samples() -> usize {
    10
}
fn default_box() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubstituteConfig {
    pub mode: ThreatMode,
    #[serde(default = "default_seed_size")]
    pub seed_size: usize,
    /// Outer loops T of dataset augmentation (black mode).
    #[serde(default = "default_loops")]
    pub outer_loops: usize,
    /// Augmentation step λ.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Training epochs per outer loop.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    /// Monte-Carlo samples used when querying the victim.
    #[serde(default = "default_samples")]
    pub victim_samples: usize,
    #[serde(default = "default_box")]
    pub input_box: [f64; 2],
}

impl SubstituteConfig {
    pub fn new(mode: ThreatMode) -> Self {
        Self {
            mode,
            seed_size: default_seed_size(),
            outer_loops: default_loops(),
            lambda: default_lambda(),
            hidden: default_hidden(),
            epochs: default_epochs(),
            batch_size: None,
            learning_rate: None,
            victim_samples: default_samples(),
            input_box: default_box(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer_loops < 1 {
            return Err(Error::Config("substitute training needs T ≥ 1 outer loops".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("augmentation step λ must be positive".into()));
        }
        if self.seed_size == 0 || self.victim_samples == 0 {
            return Err(Error::Config("seed set and victim samples must be non-empty".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("substitute layer widths must be positive".into()));
        }
        Ok(())
    }

    fn train_options(&self) -> TrainOptions {
        let mut opts = TrainOptions::epochs(self.epochs);
        if let Some(b) = self.batch_size {
            opts.batch_size = b;
        }
        if let Some(lr) = self.learning_rate {
            opts.learning_rate = lr;
        }
        opts
    }
}

#[derive(Debug, Clone)]
pub struct SubstituteResult {
    pub substitute: MlpClassifier,
    /// Inputs sent to the victim.
    pub queries: usize,
    /// Size of the training set at each outer loop.
    pub dataset_sizes: Vec<usize>,
}

/// Distils `victim` into a deterministic MLP. Grey mode fits the victim's
/// posteriors on the seed set; black mode alternates training on queried
/// labels with Jacobian augmentation
/// `x̂ = clip(x + λ ∇_x p_sub(x)ᵀ y_victim(x))`, doubling the set each loop.
pub fn train_substitute(
    victim: &dyn Classifier,
    cfg: &SubstituteConfig,
    seed: &Dataset,
    rng: &mut RngStream,
) -> Result<SubstituteResult> {
    cfg.validate()?;
    check_input(victim, seed.inputs())?;
    let take = cfg.seed_size.min(seed.len());
    let mut x = seed.inputs().select_rows(&(0..take).collect::<Vec<_>>())?;
    let c = victim.class_count();
    let arch = BnnConfig::plain(victim.input_dim(), c, cfg.hidden.clone());
    let mut substitute = MlpClassifier::build(arch, rng)?;
    let opts = cfg.train_options();
    let victim_post = |x: &Tensor, rng: &mut RngStream| -> Result<Prediction> {
        Ok(Prediction::from_logits(batched_logits(victim, x, cfg.victim_samples, rng)?))
    };

    if cfg.mode == ThreatMode::Grey {
        let post = victim_post(&x, rng)?;
        substitute.train_soft(&x, &post.posteriors, &opts, rng)?;
        return Ok(SubstituteResult {
            substitute,
            queries: take,
            dataset_sizes: vec![take],
        });
    }

    let mut labels = victim_post(&x, rng)?.labels;
    let mut sizes = Vec::with_capacity(cfg.outer_loops);
    for t in 0..cfg.outer_loops {
        sizes.push(labels.len());
        let targets = Tensor::one_hot(&labels, c)?;
        substitute.train_soft(&x, &targets, &opts, rng)?;
        if t + 1 == cfg.outer_loops {
            break;
        }
        let fresh = jacobian_augment(&substitute, &x, &labels, cfg.lambda, cfg.input_box, rng)?;
        let fresh_labels = victim_post(&fresh, rng)?.labels;
        let d = x.shape()[1];
        let n = labels.len() + fresh_labels.len();
        let mut data = x.into_data();
        data.extend(fresh.into_data());
        x = Tensor::new(vec![n, d], data)?;
        labels.extend(fresh_labels);
    }
    Ok(SubstituteResult {
        substitute,
        queries: labels.len(),
        dataset_sizes: sizes,
    })
}

/// `clip(x + λ ∇_x p_sub(y|x))` for every row.
fn jacobian_augment(
    substitute: &MlpClassifier,
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    input_box: [f64; 2],
    rng: &mut RngStream,
) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let probs = substitute.logits_on(&tape, xv, 1, rng)?.softmax()?;
    let picked = probs.gather_last(labels)?.sum();
    let g = tape.backward(picked)?.wrt(xv);
    let out = x.zip_map(&g, |xi, gi| (xi + lambda * gi).clamp(input_box[0], input_box[1]))?;
    Ok(out)
}
