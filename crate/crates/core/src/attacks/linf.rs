use deepbayes_tensor::{RngStream, Tensor};

use super::{check_inputs, cross_entropy_gradient, project_linf, AttackConfig, Observer};
use crate::error::Result;
use crate::lvm::Classifier;

const L1_GUARD: f64 = 1e-12;

/// One signed-gradient step of size ε on the cross-entropy, clipped to the
/// input box.
pub fn fgsm(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    cfg.validate()?;
    check_inputs(model, x, labels)?;
    let g = cross_entropy_gradient(model, x, labels, cfg.samples, rng)?;
    let mut adv = x.zip_map(&g, |xi, gi| xi + cfg.epsilon * gi.signum_or_zero())?;
    project_linf(&mut adv, x, cfg.epsilon, cfg.input_box);
    Ok(adv)
}

pub fn pgd(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    pgd_observed(model, x, labels, cfg, rng, &mut |_, _| {})
}

/// Projected gradient ascent with sign steps, optionally from a uniform
/// random start in the ε-ball. `observe` sees every iterate.
pub fn pgd_observed(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
    observe: Observer<'_>,
) -> Result<Tensor> {
    cfg.validate()?;
    check_inputs(model, x, labels)?;
    let mut adv = x.clone();
    if cfg.random_start && cfg.epsilon > 0.0 {
        for v in adv.data_mut() {
            *v += rng.uniform_in(-cfg.epsilon, cfg.epsilon);
        }
        project_linf(&mut adv, x, cfg.epsilon, cfg.input_box);
    }
    for it in 0..cfg.iterations() {
        let g = cross_entropy_gradient(model, &adv, labels, cfg.samples, rng)?;
        for (a, gi) in adv.data_mut().iter_mut().zip(g.data()) {
            *a += cfg.step_size * gi.signum_or_zero();
        }
        project_linf(&mut adv, x, cfg.epsilon, cfg.input_box);
        observe(it, &adv);
    }
    Ok(adv)
}

pub fn mim(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    mim_observed(model, x, labels, cfg, rng, &mut |_, _| {})
}

/// Momentum iterative method: the per-input ℓ1-normalised gradient is
/// accumulated with decay μ and the step follows the sign of the momentum.
pub fn mim_observed(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
    observe: Observer<'_>,
) -> Result<Tensor> {
    cfg.validate()?;
    check_inputs(model, x, labels)?;
    let mut adv = x.clone();
    let mut momentum = Tensor::zeros(x.shape().to_vec());
    for it in 0..cfg.iterations() {
        let g = cross_entropy_gradient(model, &adv, labels, cfg.samples, rng)?;
        for r in 0..g.rows() {
            let l1 = g.row(r).iter().map(|v| v.abs()).sum::<f64>();
            let norm = if l1 < L1_GUARD { 1.0 } else { l1 };
            for (m, gi) in momentum.row_mut(r).iter_mut().zip(g.row(r)) {
                *m = cfg.decay * *m + gi / norm;
            }
        }
        for (a, m) in adv.data_mut().iter_mut().zip(momentum.data()) {
            *a += cfg.step_size * m.signum_or_zero();
        }
        project_linf(&mut adv, x, cfg.epsilon, cfg.input_box);
        observe(it, &adv);
    }
    Ok(adv)
}

trait SignZero {
    fn signum_or_zero(self) -> f64;
}

impl SignZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

pub(super) fn sign(v: f64) -> f64 {
    v.signum_or_zero()
}
