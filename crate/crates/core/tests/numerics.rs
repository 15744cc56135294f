use std::rc::Rc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use starvae::numerics::{finite_difference_error, AttnMask, Graph, Tensor, Var};
use starvae::Result;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reduces any tensor to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = g.constant(randn(g.shape(x), seed ^ 0xABCD));
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let err = finite_difference_error(inputs, H, f).unwrap();
    assert!(err < TOL, "relative error {err:e}");
}

#[test]
fn square_derivative() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Rc::new(Tensor::scalar(3.0)));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
}

#[test]
fn double_backward_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Rc::new(Tensor::scalar(3.0)));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert!(g.backward(y).is_err());
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Rc::new(Tensor::scalar(2.0)));
    let c = g.constant(Tensor::scalar(5.0));
    let y = g.mul(x, c).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 5.0);
    assert!(grads.get(c).is_none());
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.add(a, b).is_err());
    assert!(g.matmul(a, a).is_err());
    assert!(g.bmm(a, b, false).is_err());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2]));
    let s = g.softmax(x, None).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn cross_entropy_of_certain_prediction_is_zero() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::from_f64(&[2, 3], &[0.0, 1e3, 0.0, 1e3, 0.0, 0.0]).unwrap());
    let ce = g.cross_entropy(logits, &[1, 0], 99).unwrap();
    assert!(g.value(ce).item().abs() < 1e-12);
    let ce = g.cross_entropy(logits, &[99, 99], 99).unwrap();
    assert_eq!(g.value(ce).item(), 0.0);
}

#[test]
fn masked_softmax_zeroes_masked_keys() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(randn(&[2, 1, 3, 3], 1));
    let mask = AttnMask {
        batch: 2,
        heads: 1,
        queries: 3,
        keys: 3,
        key_valid: Some(vec![true, true, false, true, true, true]),
        causal: true,
    };
    let s = g.softmax(x, Some(Rc::new(mask))).unwrap();
    let p = g.value(s);
    for r in 0..6 {
        let row = p.row(r);
        let q = r % 3;
        for (k, &v) in row.iter().enumerate() {
            let masked = k > q || (r < 3 && k == 2);
            if masked {
                assert_eq!(v, 0.0);
            }
        }
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn fd_matmul_and_bmm() {
    check(&[randn(&[2, 3, 4], 1), randn(&[4, 5], 2)], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, 3)
    });
    check(&[randn(&[2, 3, 4], 4), randn(&[2, 4, 2], 5)], |g, v| {
        let y = g.bmm(v[0], v[1], false)?;
        weighted_sum(g, y, 6)
    });
    check(&[randn(&[2, 2, 3, 4], 7), randn(&[2, 2, 5, 4], 8)], |g, v| {
        let y = g.bmm(v[0], v[1], true)?;
        weighted_sum(g, y, 9)
    });
}

#[test]
fn fd_elementwise() {
    let ins = [randn(&[3, 4], 10), randn(&[3, 4], 11)];
    check(&ins, |g, v| {
        let a = g.add(v[0], v[1])?;
        let s = g.sub(a, v[1])?;
        let m = g.mul(s, v[1])?;
        let e = g.exp(m);
        let t = g.tanh(e);
        let u = g.gelu(t);
        let k = g.scale(u, 1.7);
        let c = g.add_scalar(k, -0.3);
        weighted_sum(g, c, 12)
    });
    check(&[randn(&[2, 3, 4], 13), randn(&[4], 14)], |g, v| {
        let a = g.add_row(v[0], v[1])?;
        let m = g.mul_row(a, v[1])?;
        weighted_sum(g, m, 15)
    });
    check(&[randn(&[20], 16).map(|x| x * 3.0)], |g, v| {
        let y = g.gelu(v[0]);
        weighted_sum(g, y, 17)
    });
}

#[test]
fn fd_softmax_cross_entropy() {
    check(&[randn(&[4, 6], 20)], |g, v| {
        let s = g.softmax(v[0], None)?;
        weighted_sum(g, s, 21)
    });
    check(&[randn(&[5, 7], 22)], |g, v| g.cross_entropy(v[0], &[1, 0, 6, 3, 3], 3));
    let mask = Rc::new(AttnMask {
        batch: 2,
        heads: 2,
        queries: 3,
        keys: 3,
        key_valid: Some(vec![true, true, false, true, true, true]),
        causal: true,
    });
    check(&[randn(&[2, 2, 3, 3], 23)], move |g, v| {
        let s = g.softmax(v[0], Some(Rc::clone(&mask)))?;
        weighted_sum(g, s, 24)
    });
}

#[test]
fn fd_layer_norm_embedding_shapes() {
    check(&[randn(&[3, 5], 30), randn(&[5], 31), randn(&[5], 32)], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(g, y, 33)
    });
    check(&[randn(&[6, 3], 34)], |g, v| {
        let y = g.embedding(v[0], &[1, 5, 1, 0], &[2, 2])?;
        weighted_sum(g, y, 35)
    });
    check(&[randn(&[2, 3, 2, 4], 36)], |g, v| {
        let s = g.swap_axes12(v[0])?;
        let r = g.reshape(s, &[4, 3, 4])?;
        weighted_sum(g, r, 37)
    });
    check(&[randn(&[2, 1, 3], 38), randn(&[2, 4, 3], 39)], |g, v| {
        let c = g.concat(v[0], v[1], 1)?;
        weighted_sum(g, c, 40)
    });
}

#[test]
fn layer_norm_normalizes_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(randn(&[4, 16], 50).map(|v| v * 5.0 + 2.0));
    let gain = g.constant(Tensor::full(&[16], 1.0));
    let bias = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
    for r in 0..4 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn nonfinite_values_are_reported() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::scalar(100.0));
    assert!(g.nonfinite().is_none());
    let e = g.exp(x);
    let _ = g.scale(e, 2.0);
    assert_eq!(g.nonfinite(), Some("exp"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_shift_invariant(xs in proptest::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
        let mut g = Graph::<f64>::new();
        let n = xs.len();
        let a = g.constant(Tensor::new(&[n], xs.clone()).unwrap());
        let b = g.add_scalar(a, c);
        let sa = g.softmax(a, None).unwrap();
        let sb = g.softmax(b, None).unwrap();
        for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn fd_random_shapes(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
        let err = finite_difference_error(&[randn(&[m, k], seed), randn(&[k, n], seed + 1), randn(&[n], seed + 2)], H, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.add_row(y, v[2])?;
            let y = g.tanh(y);
            let s = g.softmax(y, None)?;
            weighted_sum(g, s, seed + 3)
        }).unwrap();
        prop_assert!(err < TOL, "relative error {err:e}");
    }
}


mod common;

#[test]
fn every_op_within_tolerance() {
    for (op, err) in common::op_gradient_errors() {
        assert!(err < TOL, "{op}: relative error {err:e}");
    }
}
