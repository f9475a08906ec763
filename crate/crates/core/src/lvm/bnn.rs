//! MLP classifiers: the Monte-Carlo dropout baseline and, with dropout off,
//! the substitute networks used by transfer attacks.

use deepbayes_tensor::{AdamState, RngStream, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use super::model::TrainOptions;
use super::network::{Activation, Mlp};
use super::{check_input, check_samples, predict, Classifier, Prediction};
use crate::data::Dataset;
use crate::error::{Error, Result};

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}

fn default_multiplier() -> usize {
    2
}

fn default_dropout() -> f64 {
    0.3
}

fn default_samples() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnnConfig {
    pub input_dim: usize,
    pub class_count: usize,
    /// Base widths, multiplied by `width_multiplier`.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_multiplier")]
    pub width_multiplier: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl BnnConfig {
    pub fn new(input_dim: usize, class_count: usize) -> Self {
        Self {
            input_dim,
            class_count,
            hidden: default_hidden(),
            width_multiplier: default_multiplier(),
            dropout: default_dropout(),
            samples: default_samples(),
            activation: Activation::default(),
        }
    }

    /// A deterministic network with the given widths.
    pub fn plain(input_dim: usize, class_count: usize, hidden: Vec<usize>) -> Self {
        Self {
            hidden,
            width_multiplier: 1,
            dropout: 0.0,
            samples: 1,
            ..Self::new(input_dim, class_count)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.class_count == 0 {
            return Err(Error::Config("input_dim and class_count must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.samples == 0 || self.width_multiplier == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(
                "samples, width multiplier and hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A softmax MLP with optional Bernoulli dropout kept on at prediction time.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    config: BnnConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    net: Mlp,
}

impl MlpClassifier {
    pub fn build(config: BnnConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.input_dim];
        dims.extend(config.hidden.iter().map(|w| w * config.width_multiplier));
        dims.push(config.class_count);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let net = Mlp::init("mlp", dims, &mut names, &mut params, rng);
        Ok(Self {
            config,
            names,
            params,
            net,
        })
    }

    pub fn from_parts(config: BnnConfig, params: Vec<Tensor>) -> Result<Self> {
        let mut m = Self::build(config, &mut RngStream::new(0, 0))?;
        if params.len() != m.params.len()
            || params.iter().zip(&m.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::InvalidArgument(
                "stored parameters do not match the network shape".into(),
            ));
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &BnnConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn forward<'t>(
        &self,
        p: &[Var<'t>],
        x: Var<'t>,
        rng: Option<&mut RngStream>,
    ) -> Result<Var<'t>> {
        let dropout = rng.map(|r| (self.config.dropout, r));
        self.net.forward_dropout(p, x, self.config.activation, dropout)
    }

    /// Cross-entropy training on hard labels; returns the mean loss per epoch.
    pub fn train(
        &mut self,
        data: &Dataset,
        opts: &TrainOptions,
        rng: &mut RngStream,
    ) -> Result<Vec<f64>> {
        let targets = Tensor::one_hot(data.labels(), self.config.class_count)?;
        self.train_soft(data.inputs(), &targets, opts, rng)
    }

    /// Cross-entropy against probability-vector targets (distillation).
    pub fn train_soft(
        &mut self,
        x: &Tensor,
        targets: &Tensor,
        opts: &TrainOptions,
        rng: &mut RngStream,
    ) -> Result<Vec<f64>> {
        check_input(self, x)?;
        if targets.shape() != [x.shape()[0], self.config.class_count] || x.shape()[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "targets of shape {:?} for {} inputs and {} classes",
                targets.shape(),
                x.shape()[0],
                self.config.class_count
            )));
        }
        if opts.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let n = x.shape()[0];
        let mut adam = AdamState::new(&self.params, opts.learning_rate);
        let mut trace = Vec::with_capacity(opts.epochs);
        for epoch in 1..=opts.epochs {
            let order = rng.permutation(n);
            let mut sum = 0.0;
            for batch in order.chunks(opts.batch_size) {
                let tape = Tape::new();
                let p: Vec<Var> = self.params.iter().map(|t| tape.leaf(t.clone())).collect();
                let xb = tape.constant(x.select_rows(batch)?);
                let tb = tape.constant(targets.select_rows(batch)?);
                let out = self.forward(&p, xb, Some(rng))?;
                let loss = out.log_softmax()?.mul(tb)?.sum_last()?.mean().neg();
                let value = loss.item()?;
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: "non-finite cross-entropy".into(),
                    });
                }
                sum += value * batch.len() as f64;
                let grads = tape.backward(loss)?;
                let g: Vec<Tensor> = p.iter().map(|v| grads.wrt(*v)).collect();
                adam.step(&mut self.params, &g).map_err(|e| match e {
                    TensorError::NonFiniteGradient { param } => Error::Diverged {
                        epoch,
                        detail: format!("non-finite gradient for {}", self.names[param]),
                    },
                    other => other.into(),
                })?;
            }
            trace.push(sum / n as f64);
        }
        Ok(trace)
    }

    /// Mean of `samples` dropout-masked softmax outputs.
    pub fn bnn_predict(&self, x: &Tensor, samples: usize, rng: &mut RngStream) -> Result<Prediction> {
        predict(self, x, samples, rng)
    }
}

impl Classifier for MlpClassifier {
    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn class_count(&self) -> usize {
        self.config.class_count
    }

    fn has_density(&self) -> bool {
        false
    }

    fn describe(&self) -> String {
        if self.config.dropout > 0.0 {
            "BNN".to_string()
        } else {
            "MLP".to_string()
        }
    }

    /// Log of the averaged softmax over independent dropout masks. Without
    /// dropout every sample is the same deterministic pass, computed once.
    fn logits_on<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        samples: usize,
        rng: &mut RngStream,
    ) -> Result<Var<'t>> {
        check_samples(samples)?;
        let p: Vec<Var> = self.params.iter().map(|t| tape.constant(t.clone())).collect();
        if self.config.dropout == 0.0 {
            return Ok(self.forward(&p, x, None)?.log_softmax()?);
        }
        let n = x.shape()[0];
        let c = self.config.class_count;
        let rows: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(samples)).collect();
        let xr = x.select_rows(&rows)?;
        let lp = self.forward(&p, xr, Some(rng))?.log_softmax()?;
        let per = lp.reshape(vec![n, samples, c])?.transpose_last2()?;
        Ok(per.log_sum_exp()?.add_scalar(-(samples as f64).ln()))
    }
}
