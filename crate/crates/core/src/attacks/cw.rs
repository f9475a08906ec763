use deepbayes_tensor::{argmax, AdamState, RngStream, Tape, Tensor};

use super::{check_inputs, margin_on, AttackConfig};
use crate::error::{Error, Result};
use crate::lvm::Classifier;

const TANH_SHRINK: f64 = 1.0 - 1e-6;

/// Default Adam step for a given `c`.
pub fn cw_learning_rate(c: f64) -> f64 {
    if c <= 10.0 {
        0.01
    } else if c <= 100.0 {
        0.03
    } else {
        0.1
    }
}

/// Best ℓ2 distortion found so far, per iteration and input;
/// infinite until the first misclassified iterate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CwTrace {
    pub best_distortion: Vec<Vec<f64>>,
}

pub fn cw_l2(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    Ok(cw_l2_traced(model, x, labels, cfg, rng)?.0)
}

/// Carlini-Wagner ℓ2 attack in tanh space with a margin loss. Returns the
/// lowest-distortion misclassified iterate per input, or the clean input
/// when none was found (or the clean input is already misclassified).
pub fn cw_l2_traced(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<(Tensor, CwTrace)> {
    cfg.validate()?;
    check_inputs(model, x, labels)?;
    let [lo, hi] = cfg.input_box;
    let half = 0.5 * (hi - lo);
    let n = labels.len();
    let d = x.shape()[1];

    let clean = model.logits(x, cfg.samples, rng)?;
    let done: Vec<bool> = (0..n).map(|i| argmax(clean.row(i)) != labels[i]).collect();

    let w0 = x.map(|v| (((v - lo) / half - 1.0) * TANH_SHRINK).atanh());
    let mut params = vec![w0];
    let mut adam = AdamState::new(&params, cfg.cw_learning_rate.unwrap_or(cw_learning_rate(cfg.c)));
    let mut best = x.clone();
    let mut best_dist = vec![f64::INFINITY; n];
    let mut trace = CwTrace::default();

    for _ in 0..cfg.iterations() {
        let tape = Tape::new();
        let w = tape.leaf(params[0].clone());
        let adv = w.tanh().add_scalar(1.0).scale(half).add_scalar(lo);
        let xc = tape.constant(x.clone());
        let dist = adv.sub(xc)?.square().sum_last()?;
        let logits = model.logits_on(&tape, adv, cfg.samples, rng)?;
        let margin = margin_on(logits, labels)?.clip(-cfg.confidence, f64::INFINITY);
        let loss = dist.add(margin.scale(cfg.c))?.sum();
        if !loss.item()?.is_finite() {
            return Err(Error::NonFinite("CW loss".into()));
        }

        let adv_now = adv.value();
        let z = logits.value();
        let dist_now = dist.value();
        for i in 0..n {
            if done[i] {
                continue;
            }
            let l2 = dist_now.data()[i].sqrt();
            if argmax(z.row(i)) != labels[i] && l2 < best_dist[i] {
                best_dist[i] = l2;
                best.row_mut(i).copy_from_slice(&adv_now.data()[i * d..(i + 1) * d]);
            }
        }
        trace.best_distortion.push(
            (0..n)
                .map(|i| if done[i] { 0.0 } else { best_dist[i] })
                .collect(),
        );

        let g = tape.backward(loss)?.wrt(w);
        adam.step(&mut params, &[g])?;
    }
    Ok((best, trace))
}
