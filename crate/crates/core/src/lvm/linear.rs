use deepbayes_tensor::{RngStream, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::Classifier;
use crate::error::{Error, Result};

/// Affine scores `x·W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.ndim() != 2 || bias.shape() != [weights.shape()[1]] {
            return Err(Error::InvalidArgument(format!(
                "weights {:?} and bias {:?} do not form a linear classifier",
                weights.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weights, bias })
    }
}

impl Classifier for LinearClassifier {
    fn input_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    fn class_count(&self) -> usize {
        self.weights.shape()[1]
    }

    fn has_density(&self) -> bool {
        false
    }

    fn describe(&self) -> String {
        "linear".to_string()
    }

    fn logits_on<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        _samples: usize,
        _rng: &mut RngStream,
    ) -> Result<Var<'t>> {
        let w = tape.constant(self.weights.clone());
        let b = tape.constant(self.bias.clone());
        Ok(x.matmul(w)?.add(b)?)
    }
}
