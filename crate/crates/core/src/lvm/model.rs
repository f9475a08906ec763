//! The seven latent-variable classifiers over (x, y, z).

use std::fmt;
use std::str::FromStr;

use deepbayes_tensor::{
    gaussian_log_density, log_sum_exp, reparameterize_with_noise, AdamState, RngStream, Tape,
    Tensor, TensorError, Var, VARIANCE_FLOOR,
};
use serde::{Deserialize, Serialize};

use super::network::{Activation, Mlp};
use super::{check_input, check_samples, Classifier};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Graph structure over (x, y, z). The first letter separates generative
/// from discriminative models, the second fully connected from bottleneck
/// structures, the last names the root node.
#[allow(clippy::upper_case_acronyms)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Factorization {
    /// p(z) p(y|z) p(x|z,y)
    GFZ,
    /// p_D(y) p(z|y) p(x|z,y)
    GFY,
    /// p(z) p(y|z) p(x|z)
    GBZ,
    /// p_D(y) p(z|y) p(x|z)
    GBY,
    /// p_D(x) p(z|x) p(y|z,x)
    DFX,
    /// p(z) p(x|z) p(y|z,x)
    DFZ,
    /// p_D(x) p(z|x) p(y|z)
    DBX,
}

impl Factorization {
    pub const ALL: [Factorization; 7] = [
        Self::GFZ,
        Self::GFY,
        Self::GBZ,
        Self::GBY,
        Self::DFX,
        Self::DFZ,
        Self::DBX,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::GFZ => "GFZ",
            Self::GFY => "GFY",
            Self::GBZ => "GBZ",
            Self::GBY => "GBY",
            Self::DFX => "DFX",
            Self::DFZ => "DFZ",
            Self::DBX => "DBX",
        }
    }

    /// GFZ, GFY, GBZ and GBY.
    pub fn is_generative(self) -> bool {
        matches!(self, Self::GFZ | Self::GFY | Self::GBZ | Self::GBY)
    }

    /// DFX and DBX, whose input marginal is the data distribution.
    pub fn is_discriminative(self) -> bool {
        matches!(self, Self::DFX | Self::DBX)
    }

    pub fn has_density(self) -> bool {
        !self.is_discriminative()
    }

    pub fn is_bottleneck(self) -> bool {
        matches!(self, Self::GBZ | Self::GBY | Self::DBX)
    }

    pub fn class_prior_mode(self) -> ClassPriorMode {
        match self {
            Self::GFY | Self::GBY => ClassPriorMode::Empirical,
            _ => ClassPriorMode::Learned,
        }
    }

    /// The factors of the joint plus the shared encoder.
    pub fn conditionals(self) -> &'static [Conditional] {
        use Conditional::*;
        match self {
            Self::GFZ => &[LatentPrior, LabelGivenLatent, InputGivenLatentLabel, Encoder],
            Self::GFY => &[LabelPrior, LatentGivenLabel, InputGivenLatentLabel, Encoder],
            Self::GBZ => &[LatentPrior, LabelGivenLatent, InputGivenLatent, Encoder],
            Self::GBY => &[LabelPrior, LatentGivenLabel, InputGivenLatent, Encoder],
            Self::DFX => &[LatentGivenInput, LabelGivenLatentInput, Encoder],
            Self::DFZ => &[LatentPrior, InputGivenLatent, LabelGivenLatentInput, Encoder],
            Self::DBX => &[LatentGivenInput, LabelGivenLatent, Encoder],
        }
    }
}

impl fmt::Display for Factorization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Factorization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownFactorization(s.to_string()))
    }
}

/// Where the class distribution comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassPriorMode {
    /// Label frequencies of the training set, p_D(y).
    Empirical,
    /// A softmax head p(y|·) trained with the rest of the model.
    Learned,
}

/// One factor of a model's joint distribution, or the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Conditional {
    LatentPrior,
    LatentGivenLabel,
    LatentGivenInput,
    LabelPrior,
    LabelGivenLatent,
    LabelGivenLatentInput,
    InputGivenLatent,
    InputGivenLatentLabel,
    Encoder,
}

impl Conditional {
    pub fn name(self) -> &'static str {
        match self {
            Self::LatentPrior => "p(z)",
            Self::LatentGivenLabel => "p(z|y)",
            Self::LatentGivenInput => "p(z|x)",
            Self::LabelPrior => "p_D(y)",
            Self::LabelGivenLatent => "p(y|z)",
            Self::LabelGivenLatentInput => "p(y|z,x)",
            Self::InputGivenLatent => "p(x|z)",
            Self::InputGivenLatentLabel => "p(x|z,y)",
            Self::Encoder => "q(z|x,y)",
        }
    }

    /// Parameter-name prefix for network-backed conditionals.
    fn key(self) -> Option<&'static str> {
        match self {
            Self::LatentPrior | Self::LabelPrior => None,
            Self::LatentGivenLabel => Some("p_z_y"),
            Self::LatentGivenInput => Some("p_z_x"),
            Self::LabelGivenLatent => Some("p_y_z"),
            Self::LabelGivenLatentInput => Some("p_y_zx"),
            Self::InputGivenLatent => Some("p_x_z"),
            Self::InputGivenLatentLabel => Some("p_x_zy"),
            Self::Encoder => Some("q_z_xy"),
        }
    }

    /// Whether this factor models the input.
    pub fn reads_input_density(self) -> bool {
        matches!(self, Self::InputGivenLatent | Self::InputGivenLatentLabel)
    }
}

fn default_latent_dim() -> usize {
    64
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}

fn default_obs_variance() -> f64 {
    1.0
}

fn default_samples() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub factorization: Factorization,
    pub input_dim: usize,
    pub class_count: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Hidden widths of the deep networks; the shallow label/latent
    /// conditionals p(z|y) and p(y|z) use only the first width.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Fixed variance σ_x² of the Gaussian observation model.
    #[serde(default = "default_obs_variance")]
    pub obs_variance: f64,
    /// Importance samples K used for prediction and detection.
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl ModelConfig {
    pub fn new(factorization: Factorization, input_dim: usize, class_count: usize) -> Self {
        Self {
            factorization,
            input_dim,
            class_count,
            latent_dim: default_latent_dim(),
            hidden: default_hidden(),
            activation: Activation::default(),
            obs_variance: default_obs_variance(),
            samples: default_samples(),
        }
    }

    pub fn class_prior_mode(&self) -> ClassPriorMode {
        self.factorization.class_prior_mode()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.class_count == 0 {
            return fail("input_dim and class_count must be at least 1".into());
        }
        if self.latent_dim == 0 {
            return fail("latent_dim must be at least 1".into());
        }
        if self.samples == 0 {
            return fail("samples must be at least 1".into());
        }
        if !(self.obs_variance.is_finite() && self.obs_variance >= VARIANCE_FLOOR) {
            return fail(format!(
                "obs_variance must be at least {VARIANCE_FLOOR}, got {}",
                self.obs_variance
            ));
        }
        if self.hidden.contains(&0) {
            return fail("hidden widths must be positive".into());
        }
        Ok(())
    }

    fn layer_dims(&self, c: Conditional) -> Option<Vec<usize>> {
        let (d, k, z) = (self.input_dim, self.class_count, self.latent_dim);
        let shallow: Vec<usize> = self.hidden.iter().take(1).copied().collect();
        let (input, widths, output) = match c {
            Conditional::LatentPrior | Conditional::LabelPrior => return None,
            Conditional::Encoder => (d + k, &self.hidden, 2 * z),
            Conditional::LatentGivenLabel => (k, &shallow, 2 * z),
            Conditional::LatentGivenInput => (d, &self.hidden, 2 * z),
            Conditional::LabelGivenLatent => (z, &shallow, k),
            Conditional::LabelGivenLatentInput => (d + z, &self.hidden, k),
            Conditional::InputGivenLatent => (z, &self.hidden, d),
            Conditional::InputGivenLatentLabel => (z + k, &self.hidden, d),
        };
        let mut dims = vec![input];
        dims.extend_from_slice(widths);
        dims.push(output);
        Some(dims)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    #[serde(default = "TrainOptions::default_batch")]
    pub batch_size: usize,
    #[serde(default = "TrainOptions::default_lr")]
    pub learning_rate: f64,
}

impl TrainOptions {
    fn default_batch() -> usize {
        100
    }

    fn default_lr() -> f64 {
        1e-3
    }

    pub fn epochs(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: Self::default_batch(),
            learning_rate: Self::default_lr(),
        }
    }
}

/// Per-epoch mean training ELBO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub elbo_trace: Vec<f64>,
}

/// Parameters and structure of one factorized latent-variable classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepBayesModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    nets: Vec<(Conditional, Mlp)>,
    log_class_priors: Vec<f64>,
}

/// Log-density contributions of each factor, per row.
struct Terms<'t> {
    parts: Vec<(Conditional, Var<'t>)>,
}

impl<'t> Terms<'t> {
    fn total(&self) -> Result<Var<'t>> {
        let mut acc = self.parts[0].1;
        for (_, v) in &self.parts[1..] {
            acc = acc.add(*v)?;
        }
        Ok(acc)
    }

    fn check_finite(&self) -> Result<()> {
        for (c, v) in &self.parts {
            if !v.value().all_finite() {
                return Err(Error::NonFinite(format!("{} term", c.name())));
            }
        }
        Ok(())
    }
}

impl DeepBayesModel {
    /// He-uniform weights, zero biases, uniform class priors.
    pub fn build(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut nets = Vec::new();
        for &c in config.factorization.conditionals() {
            if let (Some(key), Some(dims)) = (c.key(), config.layer_dims(c)) {
                nets.push((c, Mlp::init(key, dims, &mut names, &mut params, rng)));
            }
        }
        let k = config.class_count;
        Ok(Self {
            log_class_priors: vec![-(k as f64).ln(); k],
            config,
            names,
            params,
            nets,
        })
    }

    /// Reassembles a model from stored parameters.
    pub fn from_parts(
        config: ModelConfig,
        params: Vec<Tensor>,
        log_class_priors: Vec<f64>,
    ) -> Result<Self> {
        let mut model = Self::build(config, &mut RngStream::new(0, 0))?;
        model.set_params(params)?;
        model.set_log_class_priors(log_class_priors)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn factorization(&self) -> Factorization {
        self.config.factorization
    }

    pub fn conditionals(&self) -> &'static [Conditional] {
        self.config.factorization.conditionals()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for ((name, old), new) in self.names.iter().zip(&self.params).zip(&params) {
            if old.shape() != new.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {name}: expected shape {:?}, got {:?}",
                    old.shape(),
                    new.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn log_class_priors(&self) -> &[f64] {
        &self.log_class_priors
    }

    /// Replaces the empirical class log-priors; they must normalize.
    pub fn set_log_class_priors(&mut self, priors: Vec<f64>) -> Result<()> {
        if priors.len() != self.config.class_count
            || !priors.iter().all(|p| p.is_finite())
            || log_sum_exp(&priors).abs() > 1e-9
        {
            return Err(Error::InvalidArgument(format!(
                "class log-priors must be {} finite values that normalize",
                self.config.class_count
            )));
        }
        self.log_class_priors = priors;
        Ok(())
    }

    /// Parameters as tape inputs: leaves when `trainable`, else constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn net(&self, c: Conditional) -> &Mlp {
        &self
            .nets
            .iter()
            .find(|(k, _)| *k == c)
            .expect("conditional belongs to the factorization")
            .1
    }

    fn has(&self, c: Conditional) -> bool {
        self.conditionals().contains(&c)
    }

    fn forward<'t>(&self, c: Conditional, p: &[Var<'t>], input: Var<'t>) -> Result<Var<'t>> {
        self.net(c).forward(p, input, self.config.activation)
    }

    fn gaussian_head<'t>(
        &self,
        c: Conditional,
        p: &[Var<'t>],
        input: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let out = self.forward(c, p, input)?;
        let z = self.config.latent_dim;
        Ok((out.slice_last(0, z)?, out.slice_last(z, 2 * z)?))
    }

    fn standard_normal_log_density<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        let zeros = z.tape().constant(Tensor::zeros(z.shape()));
        Ok(gaussian_log_density(z, zeros, zeros)?)
    }

    fn observation_log_density<'t>(&self, x: Var<'t>, mean: Var<'t>) -> Result<Var<'t>> {
        let lv = x
            .tape()
            .constant(Tensor::full(x.shape(), self.config.obs_variance.ln()));
        Ok(gaussian_log_density(x, mean, lv)?)
    }

    fn label_log_prob<'t>(&self, logits: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        Ok(logits.log_softmax()?.mul(y)?.sum_last()?)
    }

    /// `log p(x, z, y) − log q(z|x, y)` per row with `z` drawn from the
    /// encoder using `noise`. Discriminative models contribute
    /// `log p(z|x) + log p(y|·)` in place of the joint.
    fn joint_terms<'t>(
        &self,
        p: &[Var<'t>],
        x: Var<'t>,
        y: Var<'t>,
        noise: &Tensor,
    ) -> Result<Terms<'t>> {
        use Conditional::*;
        let tape = x.tape();
        let (qm, qlv) = self.gaussian_head(Encoder, p, tape.concat_last(&[x, y])?)?;
        let z = reparameterize_with_noise(qm, qlv, noise)?;
        let mut parts = Vec::with_capacity(4);
        for &c in self.conditionals() {
            let term = match c {
                LatentPrior => self.standard_normal_log_density(z)?,
                LatentGivenLabel | LatentGivenInput => {
                    let input = if c == LatentGivenLabel { y } else { x };
                    let (m, lv) = self.gaussian_head(c, p, input)?;
                    gaussian_log_density(z, m, lv)?
                }
                LabelPrior => {
                    let lp = tape.constant(Tensor::vector(self.log_class_priors.clone()));
                    y.mul(lp)?.sum_last()?
                }
                LabelGivenLatent => self.label_log_prob(self.forward(c, p, z)?, y)?,
                LabelGivenLatentInput => {
                    let logits = self.forward(c, p, tape.concat_last(&[x, z])?)?;
                    self.label_log_prob(logits, y)?
                }
                InputGivenLatent => {
                    self.observation_log_density(x, self.forward(c, p, z)?)?
                }
                InputGivenLatentLabel => {
                    let mean = self.forward(c, p, tape.concat_last(&[z, y])?)?;
                    self.observation_log_density(x, mean)?
                }
                Encoder => gaussian_log_density(z, qm, qlv)?.neg(),
            };
            parts.push((c, term));
        }
        Ok(Terms { parts })
    }

    fn labels_tensor(&self, labels: &[usize]) -> Result<Tensor> {
        Ok(Tensor::one_hot(labels, self.config.class_count)?)
    }

    fn check_batch(&self, x: &Tensor, labels: &[usize]) -> Result<()> {
        check_input(self, x)?;
        if x.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} input rows but {} labels",
                x.shape()[0],
                labels.len()
            )));
        }
        Ok(())
    }

    /// Batch-mean single-sample ELBO on `tape`, with `noise` of shape
    /// `[N, latent_dim]` driving the encoder sample.
    pub fn elbo_on<'t>(
        &self,
        p: &[Var<'t>],
        x: Var<'t>,
        labels: &[usize],
        noise: &Tensor,
    ) -> Result<Var<'t>> {
        let y = x.tape().constant(self.labels_tensor(labels)?);
        let terms = self.joint_terms(p, x, y, noise)?;
        terms.check_finite()?;
        Ok(terms.total()?.mean())
    }

    pub fn elbo_with_noise(&self, x: &Tensor, labels: &[usize], noise: &Tensor) -> Result<f64> {
        self.check_batch(x, labels)?;
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        Ok(self.elbo_on(&p, tape.constant(x.clone()), labels, noise)?.item()?)
    }

    /// Single-sample ELBO estimate averaged over the batch.
    pub fn elbo(&self, x: &Tensor, labels: &[usize], rng: &mut RngStream) -> Result<f64> {
        let noise = rng.normal_tensor(vec![labels.len(), self.config.latent_dim]);
        self.elbo_with_noise(x, labels, &noise)
    }

    /// Rows of standard-normal noise needed for `n` inputs and `k` samples:
    /// one path per (input, class, sample) for models with a density, one
    /// per (input, sample) for discriminative ones.
    pub fn noise_rows(&self, n: usize, k: usize) -> usize {
        if self.factorization().is_discriminative() {
            n * k
        } else {
            n * self.config.class_count * k
        }
    }

    pub fn draw_noise(&self, n: usize, k: usize, rng: &mut RngStream) -> Tensor {
        rng.normal_tensor(vec![self.noise_rows(n, k), self.config.latent_dim])
    }

    /// `[N, C, K]` single-sample log-weights. For density models entry
    /// `(n, c, k)` is `log p(x_n, z, y_c) − log q(z|x_n, y_c)` with `z` the
    /// k-th encoder draw; for discriminative models it is `log p(y_c|z, x_n)`
    /// with `z` the k-th draw from `p(z|x_n)`.
    pub fn sample_log_weights_on<'t>(
        &self,
        p: &[Var<'t>],
        x: Var<'t>,
        k: usize,
        noise: &Tensor,
    ) -> Result<Var<'t>> {
        check_samples(k)?;
        let tape = x.tape();
        let n = x.shape()[0];
        let c = self.config.class_count;
        let expected = [self.noise_rows(n, k), self.config.latent_dim];
        if noise.shape() != expected {
            return Err(TensorError::ShapeMismatch {
                op: "sample noise",
                lhs: expected.to_vec(),
                rhs: noise.shape().to_vec(),
            }
            .into());
        }
        if self.factorization().is_discriminative() {
            let rows: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
            let xr = x.select_rows(&rows)?;
            let (m, lv) = self.gaussian_head(Conditional::LatentGivenInput, p, xr)?;
            let z = reparameterize_with_noise(m, lv, noise)?;
            let logits = if self.has(Conditional::LabelGivenLatent) {
                self.forward(Conditional::LabelGivenLatent, p, z)?
            } else {
                let input = tape.concat_last(&[xr, z])?;
                self.forward(Conditional::LabelGivenLatentInput, p, input)?
            };
            let scores = logits.log_softmax()?.reshape(vec![n, k, c])?;
            return Ok(scores.transpose_last2()?);
        }
        let mut rows = Vec::with_capacity(n * c * k);
        let mut labels = Vec::with_capacity(n * c * k);
        for i in 0..n {
            for class in 0..c {
                for _ in 0..k {
                    rows.push(i);
                    labels.push(class);
                }
            }
        }
        let xr = x.select_rows(&rows)?;
        let y = tape.constant(self.labels_tensor(&labels)?);
        let terms = self.joint_terms(p, xr, y, noise)?;
        Ok(terms.total()?.reshape(vec![n, c, k])?)
    }

    /// Class logits `log (1/K) Σ_k w_k` from frozen noise.
    pub fn logits_with_noise_on<'t>(
        &self,
        p: &[Var<'t>],
        x: Var<'t>,
        k: usize,
        noise: &Tensor,
    ) -> Result<Var<'t>> {
        let lw = self.sample_log_weights_on(p, x, k, noise)?;
        Ok(lw.log_sum_exp()?.add_scalar(-(k as f64).ln()))
    }

    pub fn class_logits(&self, x: &Tensor, k: usize, rng: &mut RngStream) -> Result<Tensor> {
        check_samples(k)?;
        check_input(self, x)?;
        self.logits(x, k, rng)
    }

    pub fn class_logits_with_noise(&self, x: &Tensor, k: usize, noise: &Tensor) -> Result<Tensor> {
        check_input(self, x)?;
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let v = self.logits_with_noise_on(&p, tape.constant(x.clone()), k, noise)?;
        Ok((*v.value()).clone())
    }

    /// Adam ascent on the ELBO over shuffled minibatches. Empirical class
    /// priors are set from the label frequencies first; classes absent from
    /// the data get a pseudo-count of one.
    pub fn train(
        &mut self,
        data: &Dataset,
        opts: &TrainOptions,
        rng: &mut RngStream,
    ) -> Result<TrainReport> {
        if data.input_dim() != self.config.input_dim || data.class_count() > self.config.class_count
        {
            return Err(Error::InvalidArgument(format!(
                "dataset with {} dims and {} classes does not fit model with {} dims and {} classes",
                data.input_dim(),
                data.class_count(),
                self.config.input_dim,
                self.config.class_count
            )));
        }
        if opts.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let mut trace = Vec::with_capacity(opts.epochs);
        if opts.epochs == 0 {
            return Ok(TrainReport { elbo_trace: trace });
        }
        let mut counts = vec![0usize; self.config.class_count];
        for &l in data.labels() {
            counts[l] += 1;
        }
        let counts: Vec<f64> = counts.iter().map(|&c| c.max(1) as f64).collect();
        let total: f64 = counts.iter().sum();
        self.log_class_priors = counts.iter().map(|c| (c / total).ln()).collect();

        let mut adam = AdamState::new(&self.params, opts.learning_rate);
        let n = data.len();
        for epoch in 1..=opts.epochs {
            let order = rng.permutation(n);
            let mut sum = 0.0;
            for batch in order.chunks(opts.batch_size) {
                let x = data.inputs().select_rows(batch)?;
                let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
                let noise = rng.normal_tensor(vec![batch.len(), self.config.latent_dim]);
                let tape = Tape::new();
                let p = self.bind(&tape, true);
                let elbo = self
                    .elbo_on(&p, tape.constant(x), &labels, &noise)
                    .map_err(|e| Error::Diverged {
                        epoch,
                        detail: e.to_string(),
                    })?;
                let value = elbo.item()?;
                sum += value * batch.len() as f64;
                let grads = tape.backward(elbo.neg())?;
                let g: Vec<Tensor> = p.iter().map(|v| grads.wrt(*v)).collect();
                adam.step(&mut self.params, &g).map_err(|e| match e {
                    TensorError::NonFiniteGradient { param } => Error::Diverged {
                        epoch,
                        detail: format!("non-finite gradient for {}", self.names[param]),
                    },
                    other => other.into(),
                })?;
            }
            let mean = sum / n as f64;
            log::debug!("{} epoch {epoch}: mean ELBO {mean:.6}", self.factorization());
            trace.push(mean);
        }
        Ok(TrainReport { elbo_trace: trace })
    }
}

impl Classifier for DeepBayesModel {
    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn class_count(&self) -> usize {
        self.config.class_count
    }

    fn has_density(&self) -> bool {
        self.factorization().has_density()
    }

    fn describe(&self) -> String {
        self.factorization().tag().to_string()
    }

    fn logits_on<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        samples: usize,
        rng: &mut RngStream,
    ) -> Result<Var<'t>> {
        check_samples(samples)?;
        let noise = self.draw_noise(x.shape()[0], samples, rng);
        let p = self.bind(tape, false);
        self.logits_with_noise_on(&p, x, samples, &noise)
    }
}
