//! Latent-variable classifiers and baselines.

mod bnn;
mod checkpoint;
mod linear;
mod model;
mod network;
mod two_rings;

use deepbayes_tensor::{argmax, log_sum_exp, softmax, RngStream, Tape, Tensor, Var};

use rayon::prelude::*;

use crate::error::{Error, Result};

pub use bnn::{BnnConfig, MlpClassifier};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StoredModel};
pub use linear::LinearClassifier;
pub use model::{
    ClassPriorMode, Conditional, DeepBayesModel, Factorization, ModelConfig, TrainOptions,
    TrainReport,
};
pub use network::{Activation, Mlp};
pub use two_rings::{TwoRingsClassifier, TwoRingsSpec};

/// A differentiable classifier over row-vector inputs.
///
/// `logits_on` records the computation on `tape` so attacks can take input
/// gradients; `samples` is the Monte-Carlo sample count K, drawn from `rng`.
pub trait Classifier: Send + Sync {
    fn input_dim(&self) -> usize;

    fn class_count(&self) -> usize;

    /// Whether logits estimate `log p(x, y_c)` so that `log p(x)` exists.
    fn has_density(&self) -> bool;

    fn describe(&self) -> String {
        "classifier".to_string()
    }

    /// `[N, C]` logits for the `[N, D]` input `x`.
    fn logits_on<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        samples: usize,
        rng: &mut RngStream,
    ) -> Result<Var<'t>>;

    fn logits(&self, x: &Tensor, samples: usize, rng: &mut RngStream) -> Result<Tensor> {
        let tape = Tape::new();
        let v = self.logits_on(&tape, tape.constant(x.clone()), samples, rng)?;
        let out = (*v.value()).clone();
        if !out.all_finite() {
            return Err(Error::NonFinite(format!("{} logits", self.describe())));
        }
        Ok(out)
    }
}

pub(crate) fn check_samples(samples: usize) -> Result<()> {
    if samples == 0 {
        return Err(Error::InvalidArgument("sample count K must be at least 1".into()));
    }
    Ok(())
}

pub(crate) fn check_input(model: &dyn Classifier, x: &Tensor) -> Result<()> {
    if x.ndim() != 2 || x.shape()[1] != model.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "{} expects [N, {}] inputs, got {:?}",
            model.describe(),
            model.input_dim(),
            x.shape()
        )));
    }
    Ok(())
}

/// Labels, posteriors and the logits they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub posteriors: Tensor,
    pub logits: Tensor,
}

impl Prediction {
    /// Row-wise softmax and argmax (lowest index on ties).
    pub fn from_logits(logits: Tensor) -> Self {
        let c = logits.last_dim();
        let mut post = Vec::with_capacity(logits.len());
        let mut labels = Vec::with_capacity(logits.rows());
        for r in 0..logits.rows() {
            let row = logits.row(r);
            labels.push(argmax(row));
            post.extend(softmax(row));
        }
        let posteriors = Tensor::new(vec![labels.len(), c], post).expect("same shape as logits");
        Self {
            labels,
            posteriors,
            logits,
        }
    }
}

/// Inputs per chunk in [`batched_logits`].
pub const LOGIT_CHUNK: usize = 64;

/// Logits for many inputs, evaluated in parallel chunks of [`LOGIT_CHUNK`]
/// rows. Chunk `i` draws from substream `i` of a stream forked from `rng`,
/// so results do not depend on the thread count.
pub fn batched_logits(
    model: &dyn Classifier,
    x: &Tensor,
    samples: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    check_samples(samples)?;
    check_input(model, x)?;
    let n = x.shape()[0];
    let base = rng.fork();
    let chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(LOGIT_CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    let parts = chunks
        .par_iter()
        .enumerate()
        .map(|(i, rows)| {
            let mut stream = base.substream(i as u64);
            model.logits(&x.select_rows(rows)?, samples, &mut stream)
        })
        .collect::<Result<Vec<_>>>()?;
    let c = model.class_count();
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(vec![n, c], data)?)
}

pub fn predict(
    model: &dyn Classifier,
    x: &Tensor,
    samples: usize,
    rng: &mut RngStream,
) -> Result<Prediction> {
    Ok(Prediction::from_logits(batched_logits(model, x, samples, rng)?))
}

/// `log p(x)` from class-joint logits.
pub fn log_marginal_from_logits(logits: &[f64]) -> f64 {
    log_sum_exp(logits)
}

/// Per-row `log p(x)`; an error for models without a density over inputs.
pub fn marginal_log_density(
    model: &dyn Classifier,
    x: &Tensor,
    samples: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if !model.has_density() {
        return Err(Error::DensityUnavailable(model.describe()));
    }
    let logits = predict(model, x, samples, rng)?.logits;
    Ok((0..logits.rows())
        .map(|r| log_marginal_from_logits(logits.row(r)))
        .collect())
}

/// Fraction of rows whose predicted label matches.
pub fn accuracy(labels: &[usize], predicted: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let hits = labels.iter().zip(predicted).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}
