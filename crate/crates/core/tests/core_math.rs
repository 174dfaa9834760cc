//! Forward/backward checks for the network substrate against independent oracles.

use lpb_core::nn::{
    analytic_param_grads, gradcheck, max_relative_error, numeric_param_grads, Activation,
    GradLoss, Linear, Mlp,
};
use lpb_core::tape::Tape;
use lpb_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Straightforward nested-loop reference, written without the crate's kernels.
fn oracle_forward(net: &Mlp, x: &[f32]) -> Vec<f32> {
    let mut cur: Vec<f64> = x.iter().map(|v| *v as f64).collect();
    let n_layers = net.layers().len();
    for (li, l) in net.layers().iter().enumerate() {
        let (rows, cols) = (l.weight.shape()[0], l.weight.shape()[1]);
        let mut next = vec![0.0f64; cols];
        for (j, out) in next.iter_mut().enumerate() {
            let mut s = l.bias.data()[j] as f64;
            for i in 0..rows {
                s += cur[i] * l.weight.data()[i * cols + j] as f64;
            }
            *out = if li + 1 < n_layers { s.tanh() } else { s };
        }
        cur = next;
    }
    cur.into_iter().map(|v| v as f32).collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn identity_net_passes_input_through() {
    let mut w = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        w.data_mut()[i * 3 + i] = 1.0;
    }
    let net = Mlp::from_layers(
        vec![Linear {
            weight: w,
            bias: Tensor::zeros(&[3]),
        }],
        Activation::Identity,
    )
    .unwrap();
    let y = net.forward(&Tensor::row(&[1.0, 2.0, 3.0])).unwrap();
    assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn zero_weights_output_bias() {
    let mut net = Mlp::zeros(&[4, 5, 2], Activation::Tanh).unwrap();
    net.params_mut()[3].data_mut().copy_from_slice(&[0.25, -1.5]);
    let y = net.forward(&Tensor::row(&[9.0, -3.0, 1.0, 0.5])).unwrap();
    assert_eq!(y.data(), &[0.25, -1.5]);
}

#[test]
fn random_net_matches_nested_loop_oracle() {
    let net = Mlp::new(&[6, 16, 12, 3], Activation::Tanh, &mut rng(11)).unwrap();
    let x = [0.3, -0.7, 1.2, 0.05, -0.4, 0.9];
    let got = net.forward(&Tensor::row(&x)).unwrap();
    let want = oracle_forward(&net, &x);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() <= 1e-6 * w.abs().max(1.0), "{g} vs {w}");
    }
}

#[test]
fn param_count_formula() {
    let net = Mlp::new(&[14, 128, 32], Activation::Tanh, &mut rng(0)).unwrap();
    assert_eq!(net.param_count(), 14 * 128 + 128 + 128 * 32 + 32);
    let total: usize = net.params().iter().map(|p| p.len()).sum();
    assert_eq!(total, net.param_count());
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let net = Mlp::new(&[3, 2], Activation::Tanh, &mut rng(0)).unwrap();
    let err = net.forward(&Tensor::row(&[1.0, 2.0])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[3]") && msg.contains("[2]"), "{msg}");
}

#[test]
fn taped_forward_equals_plain_forward() {
    let net = Mlp::new(&[5, 32, 32, 4], Activation::Tanh, &mut rng(3)).unwrap();
    let x = Tensor::new(&[3, 5], (0..15).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let plain = net.forward(&x).unwrap();
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, true);
    let xv = tape.constant(x);
    let y = net.forward_on_tape(&mut tape, &vars, xv).unwrap();
    assert_eq!(tape.value(y).data(), plain.data());
}

#[test]
fn gradcheck_linear_quadratic() {
    let net = Mlp::new(&[3, 2], Activation::Identity, &mut rng(5)).unwrap();
    let x = Tensor::row(&[0.5, -1.0, 2.0]);
    let err = gradcheck(&net, &GradLoss::SumSquares, &x, 1e-3).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_two_hidden_tanh_mse() {
    let net = Mlp::new(&[4, 16, 16, 3], Activation::Tanh, &mut rng(9)).unwrap();
    let x = Tensor::new(&[2, 4], vec![0.1, -0.5, 0.8, 0.3, -0.9, 0.2, 0.4, -0.1]).unwrap();
    let target = Tensor::new(&[2, 3], vec![0.5, -0.2, 0.1, 0.0, 0.3, -0.4]).unwrap();
    let err = gradcheck(&net, &GradLoss::Mse(target), &x, 1e-3).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_detects_corrupted_gradient() {
    let net = Mlp::new(&[4, 8, 2], Activation::Tanh, &mut rng(2)).unwrap();
    let x = Tensor::row(&[0.4, -0.3, 0.9, 0.1]);
    let loss = GradLoss::SumSquares;
    let numeric = numeric_param_grads(&net, &loss, &x, 1e-3).unwrap();
    let mut analytic = analytic_param_grads(&net, &loss, &x).unwrap();
    // pick the largest-magnitude weight gradient so the fault is visible
    let (idx, _) = analytic[0]
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .unwrap();
    analytic[0].data_mut()[idx] *= 2.0;
    let err = max_relative_error(&analytic, &numeric);
    assert!(err > 0.1, "{err}");
}

#[test]
fn gradcheck_rejects_nonpositive_step() {
    let net = Mlp::new(&[2, 2], Activation::Tanh, &mut rng(0)).unwrap();
    assert!(gradcheck(&net, &GradLoss::SumSquares, &Tensor::row(&[1.0, 1.0]), 0.0).is_err());
}

#[test]
fn gradcheck_reports_nonfinite_loss() {
    let mut net = Mlp::new(&[2, 2], Activation::Identity, &mut rng(0)).unwrap();
    net.params_mut()[0].data_mut()[0] = f32::INFINITY;
    let r = gradcheck(&net, &GradLoss::SumSquares, &Tensor::row(&[1.0, 1.0]), 1e-3);
    assert!(matches!(r, Err(lpb_core::Error::Numeric(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, xs in proptest::collection::vec(-2.0f32..2.0, 6)) {
        let net = Mlp::new(&[6, 10, 3], Activation::Tanh, &mut rng(seed)).unwrap();
        let a = net.forward(&Tensor::row(&xs)).unwrap();
        let b = net.forward(&Tensor::row(&xs)).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn random_mlp_gradients_match_finite_differences(seed in 0u64..1000) {
        let net = Mlp::new(&[5, 12, 12, 2], Activation::Tanh, &mut rng(seed)).unwrap();
        let x = Tensor::row(&[0.2, -0.6, 0.9, -0.1, 0.4]);
        let err = gradcheck(&net, &GradLoss::SumSquares, &x, 1e-3).unwrap();
        prop_assert!(err < 1e-4, "err {}", err);
    }
}
