//! Worst tape-vs-central-difference errors of model-level objectives over
//! 100 random tanh-network instances each.

use deepbayes_core::attacks::{cross_entropy_on, margin_on, wbs_objective_on, AttackConfig, AttackKind};
use deepbayes_core::detection::{calibrate_from_logits, CalibrationMode, DetectorKind};
use deepbayes_core::lvm::{Activation, DeepBayesModel, Factorization, ModelConfig};
use deepbayes_tensor::{argmax, gaussian_log_density, softmax, RngStream, Tape, Tensor, Var};

use super::gradient_error;

pub const INSTANCES: usize = 100;
const N: usize = 3;
const D: usize = 3;
const C: usize = 3;
const K: usize = 2;

fn tanh_model(f: Factorization, rng: &mut RngStream) -> DeepBayesModel {
    let cfg = ModelConfig {
        latent_dim: 2,
        hidden: vec![4],
        activation: Activation::Tanh,
        ..ModelConfig::new(f, D, C)
    };
    DeepBayesModel::build(cfg, rng).unwrap()
}

fn inputs(rng: &mut RngStream) -> (Tensor, Vec<usize>) {
    let x = rng.uniform_tensor(vec![N, D], 0.0, 1.0);
    let labels = (0..N).map(|_| rng.index(C)).collect();
    (x, labels)
}

fn noisy_logits<'t>(model: &DeepBayesModel, x: Var<'t>, noise: &Tensor) -> Var<'t> {
    let p = model.bind(x.tape(), false);
    model.logits_with_noise_on(&p, x, K, noise).unwrap()
}

/// Gap between the two largest entries of `row` over `allowed` indices.
fn top_gap(row: &[f64], allowed: impl Iterator<Item = usize>) -> f64 {
    let mut v: Vec<f64> = allowed.map(|j| row[j]).collect();
    v.sort_by(f64::total_cmp);
    v[v.len() - 1] - v[v.len() - 2]
}

/// Single-sample ELBO in every parameter and the input.
pub fn elbo_error(f: Factorization) -> f64 {
    let mut rng = RngStream::new(50, f as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let model = tanh_model(f, &mut rng);
        let (x, labels) = inputs(&mut rng);
        let noise = rng.normal_tensor(vec![N, 2]);
        let np = model.params().len();
        let mut all = model.params().to_vec();
        all.push(x);
        worst = worst.max(gradient_error(&all, |_, v| {
            model.elbo_on(&v[..np], v[np], &labels, &noise).unwrap()
        }));
    }
    worst
}

/// Cross-entropy of importance-sampled logits in the input.
pub fn cross_entropy_error(f: Factorization) -> f64 {
    let mut rng = RngStream::new(51, f as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let model = tanh_model(f, &mut rng);
        let (x, labels) = inputs(&mut rng);
        let noise = model.draw_noise(N, K, &mut rng);
        worst = worst.max(gradient_error(std::slice::from_ref(&x), |_, v| {
            cross_entropy_on(noisy_logits(&model, v[0], &noise), &labels).unwrap()
        }));
    }
    worst
}

/// Logit margin in the input, away from runner-up ties.
pub fn margin_error(f: Factorization) -> f64 {
    let mut rng = RngStream::new(52, f as u64);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < INSTANCES {
        let model = tanh_model(f, &mut rng);
        let (x, labels) = inputs(&mut rng);
        let noise = model.draw_noise(N, K, &mut rng);
        let z = model.class_logits_with_noise(&x, K, &noise).unwrap();
        if (0..N).any(|i| top_gap(z.row(i), (0..C).filter(|&j| j != labels[i])) < 1e-3) {
            continue;
        }
        checked += 1;
        worst = worst.max(gradient_error(std::slice::from_ref(&x), |_, v| {
            margin_on(noisy_logits(&model, v[0], &noise), &labels).unwrap().sum()
        }));
    }
    worst
}

/// CW objective `‖x' − x‖² + c·max(margin, −κ)` in tanh space.
pub fn cw_error() -> f64 {
    let mut rng = RngStream::new(53, 0);
    let (c, kappa) = (2.5, 0.5);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < INSTANCES {
        let model = tanh_model(Factorization::GBZ, &mut rng);
        let (x, labels) = inputs(&mut rng);
        let noise = model.draw_noise(N, K, &mut rng);
        let w0 = rng.uniform_tensor(vec![N, D], -1.5, 1.5);
        let tape = Tape::new();
        let adv = tape.constant(w0.clone()).tanh().add_scalar(1.0).scale(0.5);
        let z = noisy_logits(&model, adv, &noise).value();
        let kinked = (0..N).any(|i| {
            let row = z.row(i);
            let others = (0..C).filter(|&j| j != labels[i]);
            let top = others.clone().map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            top_gap(row, others) < 1e-3 || (row[labels[i]] - top + kappa).abs() < 1e-3
        });
        if kinked {
            continue;
        }
        checked += 1;
        worst = worst.max(gradient_error(std::slice::from_ref(&w0), |t, v| {
            let adv = v[0].tanh().add_scalar(1.0).scale(0.5);
            let dist = adv.sub(t.constant(x.clone())).unwrap().square().sum_last().unwrap();
            let m = margin_on(noisy_logits(&model, adv, &noise), &labels)
                .unwrap()
                .clip(-kappa, f64::INFINITY);
            dist.add(m.scale(c)).unwrap().sum()
        }));
    }
    worst
}

/// Detection-aware objective with an always-active hinge on `kind`.
pub fn wbs_error(kind: DetectorKind) -> f64 {
    let mut rng = RngStream::new(54, kind as u64);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < INSTANCES {
        let model = tanh_model(Factorization::GFZ, &mut rng);
        let (x, labels) = inputs(&mut rng);
        let train = rng.uniform_tensor(vec![12, D], 0.0, 1.0);
        let train_labels: Vec<usize> = (0..12).map(|i| i % C).collect();
        let train_logits = model.class_logits(&train, K, &mut rng).unwrap();
        let calib = calibrate_from_logits(
            &train_logits,
            &train_labels,
            true,
            CalibrationMode::Alpha { alpha: -50.0 },
            K,
        )
        .unwrap();
        let noise = model.draw_noise(N, K, &mut rng);
        let z = model.class_logits_with_noise(&x, K, &noise).unwrap();
        let near_tie = (0..N).any(|i| top_gap(z.row(i), 0..C) < 1e-3);
        let tv_kink = kind == DetectorKind::Tv
            && (0..N).any(|i| {
                let q = softmax(z.row(i));
                let p = &calib.divergence.mean_probs[argmax(z.row(i))];
                p.iter().zip(&q).any(|(a, b)| (a - b).abs() < 1e-3)
            });
        if near_tie || tv_kink {
            continue;
        }
        checked += 1;
        let cfg = AttackConfig {
            lambda_detect: 0.7,
            detector: Some(kind),
            samples: K,
            ..AttackConfig::new(AttackKind::Wbs)
        };
        worst = worst.max(gradient_error(std::slice::from_ref(&x), |_, v| {
            wbs_objective_on(&model, Some(&calib), v[0], &labels, &cfg, &noise).unwrap()
        }));
    }
    worst
}

type Primitive = for<'t> fn(&'t Tape, &[Var<'t>]) -> Var<'t>;

fn weighted<'t>(t: &'t Tape, v: Var<'t>) -> Var<'t> {
    let n: usize = v.shape().iter().product();
    let w: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.7 } else { -1.3 }).collect();
    v.mul(t.constant(Tensor::new(v.shape(), w).unwrap())).unwrap().sum()
}

/// Every tape primitive on `[3, 4]` inputs, composed with a fixed weighted
/// sum; piecewise primitives are sampled away from their kinks.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let ops: Vec<(&'static str, usize, Primitive)> = vec![
        ("add", 2, |t, v| weighted(t, v[0].add(v[1]).unwrap())),
        ("sub", 2, |t, v| weighted(t, v[0].sub(v[1]).unwrap())),
        ("mul", 2, |t, v| weighted(t, v[0].mul(v[1]).unwrap())),
        ("div", 2, |t, v| weighted(t, v[0].div(v[1].square().add_scalar(0.5)).unwrap())),
        ("matmul", 2, |t, v| weighted(t, v[0].matmul(v[1].transpose_last2().unwrap()).unwrap())),
        ("neg", 1, |t, v| weighted(t, v[0].neg())),
        ("scale", 1, |t, v| weighted(t, v[0].scale(-1.7))),
        ("exp", 1, |t, v| weighted(t, v[0].exp())),
        ("log", 1, |t, v| weighted(t, v[0].square().add_scalar(0.2).log())),
        ("sqrt", 1, |t, v| weighted(t, v[0].square().add_scalar(0.2).sqrt())),
        ("tanh", 1, |t, v| weighted(t, v[0].tanh())),
        ("square", 1, |t, v| weighted(t, v[0].square())),
        ("relu", 1, |t, v| weighted(t, v[0].relu())),
        ("abs", 1, |t, v| weighted(t, v[0].abs())),
        ("clip", 1, |t, v| weighted(t, v[0].clip(-0.5, 0.8))),
        ("softmax", 1, |t, v| weighted(t, v[0].softmax().unwrap())),
        ("log_softmax", 1, |t, v| weighted(t, v[0].log_softmax().unwrap())),
        ("log_sum_exp", 1, |t, v| weighted(t, v[0].log_sum_exp().unwrap())),
        ("sum_last", 1, |t, v| weighted(t, v[0].sum_last().unwrap().square())),
        ("mean", 1, |_, v| v[0].square().mean()),
        ("l2_norm_last", 1, |t, v| weighted(t, v[0].l2_norm_last().unwrap())),
        ("gather_last", 1, |t, v| weighted(t, v[0].gather_last(&[3, 0, 2]).unwrap())),
        ("max_last_excluding", 1, |t, v| weighted(t, v[0].max_last_excluding(&[1, 0, 3]).unwrap())),
        ("select_rows", 1, |t, v| weighted(t, v[0].select_rows(&[2, 0, 0]).unwrap())),
        ("slice_last", 1, |t, v| weighted(t, v[0].slice_last(1, 3).unwrap())),
        ("concat_last", 2, |t, v| weighted(t, t.concat_last(&[v[0], v[1]]).unwrap())),
        ("reshape", 1, |t, v| weighted(t, v[0].reshape(vec![2, 6]).unwrap().tanh())),
        ("gaussian_log_density", 2, |t, v| {
            let lv = v[1].tanh();
            weighted(t, gaussian_log_density(v[0], v[1], lv).unwrap())
        }),
    ];
    let kinks = [-0.5, 0.0, 0.8];
    let mut rng = RngStream::new(55, 0);
    ops.into_iter()
        .map(|(name, arity, op)| {
            let mut worst: f64 = 0.0;
            let mut checked = 0;
            while checked < INSTANCES {
                let ins: Vec<Tensor> = (0..arity).map(|_| rng.uniform_tensor(vec![3, 4], -2.0, 2.0)).collect();
                let near_kink = ins[0].data().iter().any(|x| kinks.iter().any(|k| (x - k).abs() < 1e-3));
                let tied = name == "max_last_excluding"
                    && (0..3).any(|i| top_gap(ins[0].row(i), (0..4).filter(|&j| j != [1, 0, 3][i])) < 1e-3);
                if near_kink || tied {
                    continue;
                }
                checked += 1;
                worst = worst.max(gradient_error(&ins, op));
            }
            (name, worst)
        })
        .collect()
}
