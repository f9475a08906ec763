use deepbayes_tensor::{
    gaussian_log_density, log_sum_exp, reparameterize, reparameterize_with_noise, softmax,
    RngStream, Tape, Tensor, TensorError,
};
use proptest::prelude::*;

#[test]
fn softmax_matches_direct_normalization() {
    let mut rng = RngStream::new(11, 0);
    for _ in 0..50 {
        let v: Vec<f64> = (0..5).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
        let exps: Vec<f64> = v.iter().map(|x| x.exp()).collect();
        let total: f64 = exps.iter().sum();
        let tape = Tape::new();
        let out = tape.constant(Tensor::vector(v.clone())).softmax().unwrap().value();
        for (a, e) in out.data().iter().zip(&exps) {
            assert!((a - e / total).abs() < 1e-12);
        }
    }
}

#[test]
fn log_sum_exp_large_values() {
    let tape = Tape::new();
    let v = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
    let out = v.log_sum_exp().unwrap().item().unwrap();
    assert!((out - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
}

#[test]
fn gaussian_density_examples() {
    let tape = Tape::new();
    let at = |x: f64, m: f64, lv: f64| {
        let x = tape.constant(Tensor::new(vec![1, 1], vec![x]).unwrap());
        let m = tape.constant(Tensor::new(vec![1, 1], vec![m]).unwrap());
        let lv = tape.constant(Tensor::new(vec![1, 1], vec![lv]).unwrap());
        gaussian_log_density(x, m, lv).unwrap().value().data()[0]
    };
    assert!((at(0.3, 0.3, 0.0) - (-0.918_938_5)).abs() < 1e-7);
    assert!((at(1.3, 0.3, 0.0) - (-1.418_938_5)).abs() < 1e-7);

    let mut rng = RngStream::new(3, 1);
    for _ in 0..100 {
        let x: Vec<f64> = (0..3).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let m: Vec<f64> = (0..3).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let lv: Vec<f64> = (0..3).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let direct: f64 = (0..3)
            .map(|d| {
                let var = lv[d].exp();
                -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x[d] - m[d]).powi(2) / (2.0 * var)
            })
            .sum();
        let tape = Tape::new();
        let c = |v: &Vec<f64>| tape.constant(Tensor::new(vec![1, 3], v.clone()).unwrap());
        let got = gaussian_log_density(c(&x), c(&m), c(&lv)).unwrap().item().unwrap();
        assert!((got - direct).abs() <= 1e-12 * direct.abs().max(1.0), "{got} vs {direct}");
    }
}

#[test]
fn gaussian_rejects_non_finite_log_var() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 2]));
    let lv = tape.constant(Tensor::new(vec![1, 2], vec![0.0, f64::NAN]).unwrap());
    assert!(matches!(
        gaussian_log_density(x, x, lv),
        Err(TensorError::NonFinite { .. })
    ));
}

#[test]
fn reparameterize_collapses_to_mean_at_the_floor() {
    let tape = Tape::new();
    let mean = tape.constant(Tensor::vector(vec![0.25, -1.0]));
    let lv = tape.constant(Tensor::vector(vec![-1e6, -1e6]));
    let noise = Tensor::vector(vec![1.0, -1.0]);
    let z = reparameterize_with_noise(mean, lv, &noise).unwrap().value();
    // Standard deviation is floored at sqrt(1e-8).
    assert!((z.data()[0] - 0.25 - 1e-4).abs() < 1e-15);
    assert!((z.data()[1] + 1.0 + 1e-4).abs() < 1e-15);
}

#[test]
fn reparameterize_pathwise_derivative_is_identity_in_mean() {
    let tape = Tape::new();
    let mean = tape.leaf(Tensor::vector(vec![0.1, 0.2, 0.3]));
    let lv = tape.leaf(Tensor::vector(vec![0.0, 0.5, -0.5]));
    let mut rng = RngStream::new(1, 2);
    let z = reparameterize(mean, lv, &mut rng).unwrap();
    let g = tape.backward(z.sum()).unwrap();
    assert_eq!(g.wrt(mean).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn reparameterize_sample_mean() {
    let n = 100_000;
    let tape = Tape::new();
    let mean = tape.constant(Tensor::full(vec![n, 1], 1.5));
    let lv = tape.constant(Tensor::full(vec![n, 1], (0.25f64).ln()));
    let mut rng = RngStream::new(99, 0);
    let z = reparameterize(mean, lv, &mut rng).unwrap().value();
    let m = z.sum() / n as f64;
    let se = 0.5 / (n as f64).sqrt();
    assert!((m - 1.5).abs() < 3.0 * se, "{m}");
}

#[test]
fn reparameterize_shape_mismatch() {
    let tape = Tape::new();
    let mean = tape.constant(Tensor::zeros(vec![2]));
    let lv = tape.constant(Tensor::zeros(vec![3]));
    assert!(reparameterize(mean, lv, &mut RngStream::new(0, 0)).is_err());
}

#[test]
fn seeded_streams_reproduce_computations() {
    let run = || {
        let mut rng = RngStream::new(42, 7);
        let tape = Tape::new();
        let w = tape.leaf(rng.normal_tensor(vec![3, 3]));
        let x = tape.constant(rng.normal_tensor(vec![4, 3]));
        let loss = x.matmul(w).unwrap().tanh().log_sum_exp().unwrap().sum();
        let g = tape.backward(loss).unwrap().wrt(w);
        (loss.item().unwrap().to_bits(), g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax(&v);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_bounds(v in prop::collection::vec(-1e3f64..1e3, 1..20)) {
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = log_sum_exp(&v);
        prop_assert!(lse >= max);
        prop_assert!(lse <= max + (v.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn clip_is_bounded_and_idempotent(
        v in prop::collection::vec(-10.0f64..10.0, 1..20),
        lo in -3.0f64..0.0,
        width in 0.0f64..3.0,
    ) {
        let hi = lo + width;
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(v));
        let once = x.clip(lo, hi);
        let twice = once.clip(lo, hi);
        prop_assert!(once.value().data().iter().all(|&y| y >= lo && y <= hi));
        prop_assert_eq!(once.value(), twice.value());
    }
}
