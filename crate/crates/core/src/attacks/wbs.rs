use deepbayes_tensor::{argmax, RngStream, Tape, Tensor, Var};

use super::linf::sign;
use super::{check_inputs, project_linf, AttackConfig, Observer};
use crate::detection::{DetectorCalibration, DetectorKind, POSTERIOR_FLOOR};
use crate::error::{Error, Result};
use crate::lvm::{Classifier, DeepBayesModel};

/// The sampling-aware objective on frozen `noise`:
/// `Σ_n Σ_k log p_k(y_n | x_n) + λ Σ_n max(0, Φ(x_n) − δ)`, where `p_k` is
/// the class posterior built from the k-th single-sample weights. Class
/// dependent detectors use the current prediction of the frozen-sample
/// logits for both Φ and δ.
pub fn wbs_objective_on<'t>(
    model: &DeepBayesModel,
    calib: Option<&DetectorCalibration>,
    x: Var<'t>,
    labels: &[usize],
    cfg: &AttackConfig,
    noise: &Tensor,
) -> Result<Var<'t>> {
    let tape = x.tape();
    let p = model.bind(tape, false);
    let n = labels.len();
    let c = model.config().class_count;
    let k = cfg.samples;
    let lw = model.sample_log_weights_on(&p, x, k, noise)?;
    let per_sample = lw
        .transpose_last2()?
        .reshape(vec![n * k, c])?
        .log_softmax()?;
    let rows: Vec<usize> = labels.iter().flat_map(|&y| std::iter::repeat(y).take(k)).collect();
    let confidence = per_sample.gather_last(&rows)?.sum();
    if cfg.lambda_detect == 0.0 {
        return Ok(confidence);
    }

    let kind = cfg
        .detector
        .ok_or_else(|| Error::Config("a detector is required when lambda_detect > 0".into()))?;
    let calib = calib.ok_or_else(|| {
        Error::InvalidArgument("a detector-aware attack needs a calibration".into())
    })?;
    if !calib.available(kind) || (kind.needs_density() && !model.has_density()) {
        return Err(Error::DensityUnavailable(format!(
            "{} detection on {}",
            kind.name(),
            model.describe()
        )));
    }
    let logits = lw.log_sum_exp()?.add_scalar(-(k as f64).ln());
    let values = logits.value();
    let predicted: Vec<usize> = (0..n).map(|i| argmax(values.row(i))).collect();
    let stat = match kind {
        DetectorKind::Marginal => logits.log_sum_exp()?.neg(),
        DetectorKind::Logit => logits.gather_last(&predicted)?.neg(),
        DetectorKind::Kl | DetectorKind::Tv => {
            let mean: Vec<f64> = predicted
                .iter()
                .flat_map(|&y| calib.divergence.mean_probs[y].iter().copied())
                .collect();
            let reference = Tensor::new(vec![n, c], mean)?;
            if kind == DetectorKind::Kl {
                let log_ref = reference.map(|v| if v > 0.0 { v.ln() } else { 0.0 });
                let log_q = logits.log_softmax()?.clip(POSTERIOR_FLOOR.ln(), f64::INFINITY);
                tape.constant(log_ref)
                    .sub(log_q)?
                    .mul(tape.constant(reference))?
                    .sum_last()?
            } else {
                logits
                    .softmax()?
                    .clip(POSTERIOR_FLOOR, f64::INFINITY)
                    .sub(tape.constant(reference))?
                    .abs()
                    .sum_last()?
                    .scale(0.5)
            }
        }
    };
    let thresholds = predicted
        .iter()
        .map(|&y| calib.threshold(kind, y))
        .collect::<Result<Vec<_>>>()?;
    let hinge = stat.sub(tape.constant(Tensor::vector(thresholds)))?.relu().sum();
    Ok(confidence.add(hinge.scale(cfg.lambda_detect))?)
}

pub fn wbs_detection_aware(
    model: &DeepBayesModel,
    calib: Option<&DetectorCalibration>,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    wbs_detection_aware_observed(model, calib, x, labels, cfg, rng, &mut |_, _| {})
}

/// Projected sign-gradient descent on [`wbs_objective_on`] with one set of
/// sample paths drawn up front and reused at every step.
pub fn wbs_detection_aware_observed(
    model: &DeepBayesModel,
    calib: Option<&DetectorCalibration>,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngStream,
    observe: Observer<'_>,
) -> Result<Tensor> {
    cfg.validate()?;
    check_inputs(model, x, labels)?;
    let n = labels.len();
    let noise = model.draw_noise(n, cfg.samples, rng);
    let mut adv = x.clone();
    if cfg.random_start && cfg.epsilon > 0.0 {
        for v in adv.data_mut() {
            *v += rng.uniform_in(-cfg.epsilon, cfg.epsilon);
        }
        project_linf(&mut adv, x, cfg.epsilon, cfg.input_box);
    }
    for it in 0..cfg.iterations() {
        let tape = Tape::new();
        let xv = tape.leaf(adv.clone());
        let loss = wbs_objective_on(model, calib, xv, labels, cfg, &noise)?;
        if !loss.item()?.is_finite() {
            return Err(Error::NonFinite("detection-aware attack objective".into()));
        }
        let g = tape.backward(loss)?.wrt(xv);
        for (a, gi) in adv.data_mut().iter_mut().zip(g.data()) {
            *a -= cfg.step_size * sign(*gi);
        }
        project_linf(&mut adv, x, cfg.epsilon, cfg.input_box);
        observe(it, &adv);
    }
    Ok(adv)
}
