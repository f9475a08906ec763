#![allow(dead_code)]

pub mod grad;

use deepbayes_core::data::{sample_two_rings, AffineMap, Dataset};
use deepbayes_core::lvm::{BnnConfig, MlpClassifier, TrainOptions, TwoRingsClassifier, TwoRingsSpec};
use deepbayes_tensor::gradcheck::{max_relative_error, numeric_gradient};
use deepbayes_tensor::{RngStream, Tape, Tensor, Var};

/// Two-rings samples mapped into the unit box, with the matching analytic
/// classifier in the same coordinates.
pub fn unit_rings(n_per_class: usize, seed: u64) -> (Dataset, TwoRingsClassifier) {
    let spec = TwoRingsSpec::default();
    let (scale, shift) = spec.unit_box_map();
    let raw = sample_two_rings(&spec, n_per_class, &mut RngStream::new(seed, 0)).unwrap();
    let map = AffineMap::isotropic(2, scale, shift.to_vec());
    let data = map.apply_dataset(&raw).unwrap();
    let clf = TwoRingsClassifier::new(spec.transformed(scale, shift)).unwrap();
    (data, clf)
}

/// Small ReLU MLP fitted to unit-box two-rings data.
pub fn toy_mlp(data: &Dataset, seed: u64) -> MlpClassifier {
    let mut rng = RngStream::new(seed, 1);
    let mut mlp = MlpClassifier::build(BnnConfig::plain(2, 2, vec![32, 32]), &mut rng).unwrap();
    let mut opts = TrainOptions::epochs(60);
    opts.learning_rate = 1e-2;
    opts.batch_size = 50;
    mlp.train(data, &opts, &mut rng).unwrap();
    mlp
}

/// Linear-Gaussian GFY model with closed-form `log p(x, y)`:
/// z | y ~ N(m_y, diag(s)), x | z, y ~ N(z·A + v_y + b, σ² I) with the rows
/// of A orthogonal, so the exact posterior q(z | x, y) is diagonal and
/// linear in (x, y).
pub struct ConjugateToy {
    pub model: deepbayes_core::lvm::DeepBayesModel,
    means: [[f64; 2]; 2],
    log_var: [f64; 2],
    a: [[f64; 2]; 2],
    v: [[f64; 2]; 2],
    b: [f64; 2],
    obs_var: f64,
    log_priors: [f64; 2],
}

impl ConjugateToy {
    pub fn new() -> Self {
        use deepbayes_core::lvm::{DeepBayesModel, Factorization, ModelConfig};
        let obs_var = 0.3;
        let cfg = ModelConfig {
            latent_dim: 2,
            hidden: vec![],
            obs_variance: obs_var,
            ..ModelConfig::new(Factorization::GFY, 2, 2)
        };
        let model = DeepBayesModel::build(cfg, &mut RngStream::new(0, 0)).unwrap();
        let mut toy = Self {
            model,
            means: [[0.5, -0.3], [-0.4, 0.8]],
            log_var: [0.2, -0.5],
            a: [[0.9, 1.2], [-0.56, 0.42]],
            v: [[0.3, -0.2], [-0.1, 0.5]],
            b: [0.1, 0.05],
            obs_var,
            log_priors: [0.3f64.ln(), 0.7f64.ln()],
        };
        toy.set_exact_posterior(0.0, 0.0);
        toy
    }

    fn set(&mut self, name: &str, data: Vec<f64>) {
        let p = self.model.param_mut(name).unwrap();
        let shape = p.shape().to_vec();
        *p = deepbayes_tensor::Tensor::new(shape, data).unwrap();
    }

    /// Posterior precision per latent coordinate.
    fn precision(&self) -> [f64; 2] {
        [0, 1].map(|j| {
            let a2: f64 = self.a[j].iter().map(|v| v * v).sum();
            (-self.log_var[j]).exp() + a2 / self.obs_var
        })
    }

    /// Encoder equal to the exact posterior, optionally with its mean
    /// shifted and its log-variance inflated.
    pub fn set_exact_posterior(&mut self, mean_shift: f64, log_var_shift: f64) {
        // p(z|y): one-hot rows carry mean and log-variance, zero bias.
        let mut w = Vec::new();
        for y in 0..2 {
            w.extend_from_slice(&self.means[y]);
            w.extend_from_slice(&self.log_var);
        }
        self.set("p_z_y.0.weight", w);
        self.set("p_z_y.0.bias", vec![0.0; 4]);
        // p(x|z,y): input [z, y].
        let mut w = Vec::new();
        w.extend_from_slice(&self.a[0]);
        w.extend_from_slice(&self.a[1]);
        w.extend_from_slice(&self.v[0]);
        w.extend_from_slice(&self.v[1]);
        self.set("p_x_zy.0.weight", w);
        self.set("p_x_zy.0.bias", self.b.to_vec());
        self.model
            .set_log_class_priors(self.log_priors.to_vec())
            .unwrap();
        // q(z|x,y): input [x, y], output [mean, log-variance].
        let prec = self.precision();
        let cov = prec.map(|p| 1.0 / p);
        let mut w = vec![0.0; 16];
        for d in 0..2 {
            for j in 0..2 {
                w[d * 4 + j] = cov[j] * self.a[j][d] / self.obs_var;
            }
        }
        for y in 0..2 {
            for j in 0..2 {
                let resid: f64 = (0..2)
                    .map(|d| self.a[j][d] * (self.v[y][d] + self.b[d]))
                    .sum();
                let m = cov[j] * (self.means[y][j] * (-self.log_var[j]).exp() - resid / self.obs_var);
                w[(2 + y) * 4 + j] = m + mean_shift;
                w[(2 + y) * 4 + 2 + j] = cov[j].ln() + log_var_shift;
            }
        }
        self.set("q_z_xy.0.weight", w);
        self.set("q_z_xy.0.bias", vec![0.0; 4]);
    }

    /// Closed-form `log p(x, y)` from the marginal Gaussian of x given y.
    pub fn log_joint(&self, x: [f64; 2], y: usize) -> f64 {
        use nalgebra::{Matrix2, Vector2};
        let a = Matrix2::new(self.a[0][0], self.a[0][1], self.a[1][0], self.a[1][1]);
        let s = Matrix2::from_diagonal(&Vector2::new(self.log_var[0].exp(), self.log_var[1].exp()));
        let cov = a.transpose() * s * a + Matrix2::identity() * self.obs_var;
        let m = Vector2::new(self.means[y][0], self.means[y][1]);
        let mean = a.transpose() * m
            + Vector2::new(self.v[y][0] + self.b[0], self.v[y][1] + self.b[1]);
        let r = Vector2::new(x[0], x[1]) - mean;
        let chol = cov.cholesky().unwrap();
        let quad = r.dot(&chol.solve(&r));
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        self.log_priors[y] - (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det - 0.5 * quad
    }
}

/// Largest relative error between tape and central-difference (h = 1e-5)
/// gradients of `f` with respect to every element of `inputs`.
pub fn gradient_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let grads = tape.backward(f(&tape, &leaves)).unwrap();
    let analytic: Vec<Tensor> = leaves.iter().map(|v| grads.wrt(*v)).collect();
    let numeric = numeric_gradient(
        |ts| {
            let tape = Tape::new();
            let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
            f(&tape, &vars).item().unwrap()
        },
        inputs,
        1e-5,
    );
    max_relative_error(&analytic, &numeric)
}
