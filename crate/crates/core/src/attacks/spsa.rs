use deepbayes_tensor::{AdamState, RngStream, Tensor};

use super::{check_inputs, margin, project_linf, AttackConfig};
use crate::error::{Error, Result};
use crate::lvm::Classifier;

/// Perturbation pairs evaluated per call of the objective.
const PAIRS_PER_CALL: usize = 256;

/// Simultaneous-perturbation estimate of `∇f(x)` at a single point `x`
/// (shape `[D]` or `[1, D]`):
/// `(1/S) Σ_s (f(x + δv_s) − f(x − δv_s)) / (2δ) · v_s` with Rademacher `v_s`.
///
/// `f` maps a `[M, D]` batch of points to `M` values.
pub fn spsa_gradient<F>(
    f: F,
    x: &Tensor,
    samples: usize,
    delta: f64,
    rng: &mut RngStream,
) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Vec<f64>>,
{
    let mut f = f;
    if samples == 0 || !(delta > 0.0) {
        return Err(Error::InvalidArgument(
            "SPSA needs at least one sample and a positive perturbation".into(),
        ));
    }
    let d = x.len();
    let mut grad = vec![0.0; d];
    let mut left = samples;
    while left > 0 {
        let m = left.min(PAIRS_PER_CALL);
        left -= m;
        let dirs: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.rademacher()).collect())
            .collect();
        let mut batch = Vec::with_capacity(2 * m * d);
        for v in &dirs {
            batch.extend(x.data().iter().zip(v).map(|(xi, vi)| xi + delta * vi));
        }
        for v in &dirs {
            batch.extend(x.data().iter().zip(v).map(|(xi, vi)| xi - delta * vi));
        }
        let values = f(&Tensor::new(vec![2 * m, d], batch)?)?;
        if values.len() != 2 * m {
            return Err(Error::InvalidArgument(format!(
                "objective returned {} values for {} points",
                values.len(),
                2 * m
            )));
        }
        for (s, v) in dirs.iter().enumerate() {
            let diff = (values[s] - values[m + s]) / (2.0 * delta);
            for (g, vi) in grad.iter_mut().zip(v) {
                *g += diff * vi;
            }
        }
    }
    for g in &mut grad {
        *g /= samples as f64;
    }
    Ok(Tensor::new(x.shape().to_vec(), grad)?)
}

/// Gradient-free attack: Adam descent on the margin loss
/// `Z_y − max_{j≠y} Z_j` with SPSA gradient estimates, projected onto the
/// ε-ball and input box. Stops once the loss falls below the configured
/// threshold.
pub fn spsa(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    cfg.validate()?;
    check_inputs(model, x, labels)?;
    let d = x.shape()[1];
    let mut out = x.clone();
    for (i, &y) in labels.iter().enumerate() {
        let clean = x.select_rows(&[i])?;
        let mut params = vec![clean.clone()];
        let mut adam = AdamState::new(&params, cfg.spsa_learning_rate);
        let mut eval_rng = rng.fork();
        let mut dir_rng = rng.fork();
        let mut objective = |pts: &Tensor| -> Result<Vec<f64>> {
            let logits = model.logits(pts, cfg.samples, &mut eval_rng)?;
            Ok(margin(&logits, &vec![y; pts.shape()[0]]))
        };
        for _ in 0..cfg.iterations() {
            if objective(&params[0])?[0] < cfg.spsa_stop {
                break;
            }
            let g = spsa_gradient(
                &mut objective,
                &params[0],
                cfg.spsa_samples,
                cfg.spsa_delta,
                &mut dir_rng,
            )?;
            adam.step(&mut params, &[g])?;
            project_linf(&mut params[0], &clean, cfg.epsilon, cfg.input_box);
        }
        out.row_mut(i).copy_from_slice(&params[0].data()[..d]);
    }
    Ok(out)
}
