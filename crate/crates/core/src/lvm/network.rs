//! Fully connected networks over a flat parameter list.

use deepbayes_tensor::{RngStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<'t>(self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => v.relu(),
            Activation::Tanh => v.tanh(),
        }
    }
}

/// Layer sizes plus the position of the first weight in a shared parameter
/// list. Layer `l` owns parameters `offset + 2l` (weight, `[in, out]`) and
/// `offset + 2l + 1` (bias, `[out]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    offset: usize,
    dims: Vec<usize>,
}

impl Mlp {
    /// Appends freshly initialized parameters to `names`/`params`:
    /// He-uniform weights and zero biases.
    pub fn init(
        prefix: &str,
        dims: Vec<usize>,
        names: &mut Vec<String>,
        params: &mut Vec<Tensor>,
        rng: &mut RngStream,
    ) -> Self {
        let offset = params.len();
        for (l, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            names.push(format!("{prefix}.{l}.weight"));
            params.push(rng.uniform_tensor(vec![fan_in, fan_out], -bound, bound));
            names.push(format!("{prefix}.{l}.bias"));
            params.push(Tensor::zeros(vec![fan_out]));
        }
        Self { offset, dims }
    }

    /// Rebinds layer sizes to parameters already present at `offset`.
    pub fn at(offset: usize, dims: Vec<usize>) -> Self {
        Self { offset, dims }
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        2 * self.layers()
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least one layer")
    }

    /// Shapes of this network's parameters, in order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.dims
            .windows(2)
            .flat_map(|p| [vec![p[0], p[1]], vec![p[1]]])
            .collect()
    }

    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>, act: Activation) -> Result<Var<'t>> {
        self.forward_dropout(params, x, act, None)
    }

    /// Forward pass with optional inverted dropout after every hidden
    /// activation: each unit is kept with probability `1 - rate` and scaled
    /// by `1 / (1 - rate)`.
    pub fn forward_dropout<'t>(
        &self,
        params: &[Var<'t>],
        x: Var<'t>,
        act: Activation,
        mut dropout: Option<(f64, &mut RngStream)>,
    ) -> Result<Var<'t>> {
        let mut h = x;
        let last = self.layers() - 1;
        for l in 0..self.layers() {
            let w = params[self.offset + 2 * l];
            let b = params[self.offset + 2 * l + 1];
            h = h.matmul(w)?.add(b)?;
            if l < last {
                h = act.apply(h);
                if let Some((rate, rng)) = dropout.as_mut() {
                    if *rate > 0.0 {
                        let keep = 1.0 - *rate;
                        let shape = h.shape();
                        let n: usize = shape.iter().product();
                        let mask: Vec<f64> = (0..n)
                            .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                            .collect();
                        h = h.mul(h.tape().constant(Tensor::new(shape, mask)?))?;
                    }
                }
            }
        }
        Ok(h)
    }
}
