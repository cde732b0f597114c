mod common;

use common::checks::{kernel_worst, randn, KERNELS};
use medlm_core::autodiff::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 50;
const TOL: f64 = 1e-4;

#[test]
fn every_kernel_matches_finite_differences() {
    for case in KERNELS {
        let (err, trial) = kernel_worst(case, TRIALS);
        assert!(err <= TOL, "{} trial {trial}: relative error {err}", case.0);
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let x = randn(&mut rng, &[3, 7]);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v);
        let out = tape.value(s);
        for r in 0..3 {
            let row = out.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let n = rng.gen_range(2..16);
        let x = randn(&mut rng, &[4, n]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::full(&[n], 1.0));
        let b = tape.constant(Tensor::zeros(&[n]));
        let y = tape.layer_norm(xv, g, b).unwrap();
        let out = tape.value(y);
        for r in 0..4 {
            let row = x.row(r);
            let mean_in = row.iter().sum::<f64>() / n as f64;
            let var_in = row.iter().map(|v| (v - mean_in).powi(2)).sum::<f64>() / n as f64;
            if var_in <= 1e-5 {
                continue;
            }
            let y = out.row(r);
            let mean = y.iter().sum::<f64>() / n as f64;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() <= 1e-5);
            // the stabilizer shrinks the variance by var / (var + eps)
            assert!((var - 1.0).abs() <= 1e-4 || (var - var_in / (var_in + 1e-5)).abs() < 1e-9);
        }
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let x = randn(&mut rng, &[3, 4]);
        let w = randn(&mut rng, &[4, 5]);
        let alpha: f64 = rng.gen_range(-3.0..3.0);
        let grad = |scale: Option<f64>| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let y = tape.matmul(xv, wv).unwrap();
            let y = tape.gelu(y);
            let mut loss = tape.cross_entropy(y, &[0, 2, 4]).unwrap();
            if let Some(a) = scale {
                loss = tape.scale(loss, a);
            }
            let g = tape.backward(loss).unwrap();
            [g.get(xv).unwrap().to_f64_vec(), g.get(wv).unwrap().to_f64_vec()].concat()
        };
        let base = grad(None);
        let scaled = grad(Some(alpha));
        let expected: Vec<f64> = base.iter().map(|g| g * alpha).collect();
        let diff: f64 = scaled.iter().zip(&expected).map(|(a, b)| (a - b).abs()).sum();
        let norm: f64 = expected.iter().map(|v| v.abs()).sum();
        assert!(diff <= 1e-12 * norm.max(1e-300));
    }
}

#[test]
fn gradients_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[6, 12]).cast::<f32>();
    let run_once = || {
        let mut tape = Tape::<f32>::new();
        let v = tape.param(x.clone());
        let a = tape.causal_attention(v, 2, 2, 3, &[true; 6]).unwrap();
        let l = tape.cross_entropy(a, &[0, 1, 2, 3, 0, 1]).unwrap();
        let g = tape.backward(l).unwrap();
        g.get(v).unwrap().clone()
    };
    assert!(run_once().bit_eq(&run_once()));
}
