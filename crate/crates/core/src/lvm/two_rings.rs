//! The two-rings toy problem: two noisy circles and the analytic generative
//! classifier that projects onto each ring.

use std::f64::consts::{LN_2, PI};

use deepbayes_tensor::{log_sum_exp, RngStream, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lvm::Classifier;

/// Ring centers, radii and isotropic noise variance; class prior is 0.5 each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoRingsSpec {
    pub centers: [[f64; 2]; 2],
    pub radii: [f64; 2],
    pub noise_variance: f64,
}

impl Default for TwoRingsSpec {
    fn default() -> Self {
        Self {
            centers: [[0.0, 0.0], [0.0, 0.0]],
            radii: [1.0, 2.0],
            noise_variance: 0.01,
        }
    }
}

impl TwoRingsSpec {
    /// Checks the invariants required by the analytic classifier.
    pub fn validate(&self) -> Result<()> {
        if !self.radii.iter().all(|r| r.is_finite() && *r > 0.0) {
            return Err(Error::Config(format!(
                "two-rings radii must be positive, got {:?}",
                self.radii
            )));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance > 0.0) {
            return Err(Error::Config(format!(
                "two-rings noise variance must be positive, got {}",
                self.noise_variance
            )));
        }
        if !self.centers.iter().flatten().all(|c| c.is_finite()) {
            return Err(Error::Config("two-rings centers must be finite".into()));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.noise_variance.sqrt()
    }

    /// Closest point to `x` on ring `class`. The center itself maps along (1, 0).
    pub fn project(&self, class: usize, x: [f64; 2]) -> [f64; 2] {
        let c = self.centers[class];
        let r = self.radii[class];
        let d = [x[0] - c[0], x[1] - c[1]];
        let n = d[0].hypot(d[1]);
        if n == 0.0 {
            [c[0] + r, c[1]]
        } else {
            [c[0] + r * d[0] / n, c[1] + r * d[1] / n]
        }
    }

    /// Euclidean distance from `x` to ring `class`.
    pub fn distance_to_ring(&self, class: usize, x: [f64; 2]) -> f64 {
        let c = self.centers[class];
        ((x[0] - c[0]).hypot(x[1] - c[1]) - self.radii[class]).abs()
    }

    /// `log N(x; μ_c, σ²I) + log 0.5` for both classes.
    pub fn class_logits(&self, x: [f64; 2]) -> [f64; 2] {
        let s2 = self.noise_variance;
        let norm = -(2.0 * PI * s2).ln() - LN_2;
        [0, 1].map(|c| {
            let mu = self.project(c, x);
            let r2 = (x[0] - mu[0]).powi(2) + (x[1] - mu[1]).powi(2);
            norm - r2 / (2.0 * s2)
        })
    }

    pub fn log_marginal(&self, x: [f64; 2]) -> f64 {
        log_sum_exp(&self.class_logits(x))
    }

    /// The same problem after `x ↦ scale·x + shift`.
    pub fn transformed(&self, scale: f64, shift: [f64; 2]) -> Self {
        Self {
            centers: self
                .centers
                .map(|c| [scale * c[0] + shift[0], scale * c[1] + shift[1]]),
            radii: self.radii.map(|r| scale * r),
            noise_variance: self.noise_variance * scale * scale,
        }
    }

    /// Isotropic affine map taking the region within 5σ of both rings into
    /// the unit box, centered at 0.5.
    pub fn unit_box_map(&self) -> (f64, [f64; 2]) {
        let pad = 5.0 * self.sigma();
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for c in 0..2 {
            for d in 0..2 {
                lo[d] = lo[d].min(self.centers[c][d] - self.radii[c] - pad);
                hi[d] = hi[d].max(self.centers[c][d] + self.radii[c] + pad);
            }
        }
        let width = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let scale = 1.0 / width;
        let shift = [0, 1].map(|d| 0.5 - scale * 0.5 * (lo[d] + hi[d]));
        (scale, shift)
    }
}

/// The analytic ring-projection classifier as a differentiable model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoRingsClassifier {
    pub spec: TwoRingsSpec,
}

impl TwoRingsClassifier {
    pub fn new(spec: TwoRingsSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }
}

impl Classifier for TwoRingsClassifier {
    fn input_dim(&self) -> usize {
        2
    }

    fn class_count(&self) -> usize {
        2
    }

    fn has_density(&self) -> bool {
        true
    }

    fn logits_on<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        _samples: usize,
        _rng: &mut RngStream,
    ) -> Result<Var<'t>> {
        let s2 = self.spec.noise_variance;
        let norm = -(2.0 * PI * s2).ln() - LN_2;
        let mut cols = Vec::with_capacity(2);
        for c in 0..2 {
            let center = tape.constant(Tensor::vector(self.spec.centers[c].to_vec()));
            let dist = x.sub(center)?.l2_norm_last()?;
            let resid = dist.add_scalar(-self.spec.radii[c]);
            let logit = resid.square().scale(-1.0 / (2.0 * s2)).add_scalar(norm);
            let n = logit.shape()[0];
            cols.push(logit.reshape(vec![n, 1])?);
        }
        Ok(tape.concat_last(&cols)?)
    }
}
