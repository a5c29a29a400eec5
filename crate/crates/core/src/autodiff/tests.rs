use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

/// Naive triple loop.
fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            for l in 0..k {
                out[i * p + j] += a[i * k + l] * b[l * p + j];
            }
        }
    }
    out
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let id = g.input(&Tensor::identity(2));
    let col = g.input(&t2(&[&[3.0], &[4.0]]));
    let out = g.matmul(id, col).unwrap();
    assert_eq!(g.value(out), &[3.0, 4.0]);

    let a = t2(&[&[1.0, 0.0], &[0.0, 2.0]]);
    let av = g.input(&a);
    let out = g.matmul(av, col).unwrap();
    assert_eq!(g.value(out), matmul_oracle(a.data(), &[3.0, 4.0], 2, 2, 1).as_slice());
    assert_eq!(g.value(out), &[3.0, 8.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = g.input(&Tensor::zeros(&[3, 4]));
    let any = g.input(&random_tensor(&mut rng, &[4, 2]));
    let out = g.matmul(z, any).unwrap();
    assert_eq!(g.shape(out), &[3, 2]);
    assert!(g.value(out).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_oracle_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (m, k, p) in [(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 33, 5)] {
        let a = random_tensor(&mut rng, &[m, k]);
        let b = random_tensor(&mut rng, &[k, p]);
        let mut g = Graph::new();
        let (av, bv) = (g.input(&a), g.input(&b));
        let out = g.matmul(av, bv).unwrap();
        let expected = matmul_oracle(a.data(), b.data(), m, k, p);
        for (x, y) in g.value(out).iter().zip(&expected) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.input(&Tensor::zeros(&[2, 3]));
    let b = g.input(&Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn ewise_examples() {
    let mut g = Graph::new();
    let x = g.input(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let zero = g.ewise(EwiseOp::Mul, x, 0.0).unwrap();
    assert_eq!(g.value(zero), &[0.0, 0.0, 0.0]);
    let one = g.ewise(EwiseOp::Mul, x, 1.0).unwrap();
    assert_eq!(g.value(one), &[1.0, 2.0, 3.0]);

    let a = [1.0, 2.0];
    let b = [3.0, 4.0];
    let av = g.input(&Tensor::from_vec(a.to_vec()));
    let bv = g.input(&Tensor::from_vec(b.to_vec()));
    let sum = g.add(av, bv).unwrap();
    let oracle: Vec<f64> = (0..2).map(|i| a[i] + b[i]).collect();
    assert_eq!(g.value(sum), oracle.as_slice());

    let diff = g.ewise(EwiseOp::Sub, av, bv).unwrap();
    assert_eq!(g.value(diff), &[-2.0, -2.0]);
    let scaled = g.ewise(EwiseOp::Scale, av, 2.5).unwrap();
    assert_eq!(g.value(scaled), &[2.5, 5.0]);
}

#[test]
fn ewise_rejects_mismatched_shapes() {
    let mut g = Graph::new();
    let a = g.input(&Tensor::zeros(&[3]));
    let b = g.input(&Tensor::zeros(&[2]));
    assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    assert!(matches!(g.ewise(EwiseOp::Scale, a, b), Err(Error::Contract(_))));
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let z = g.input(&Tensor::from_vec(vec![0.0, -3.0, 2.0]));
    let s = g.sigmoid(z);
    let r = g.relu(z);
    assert_eq!(g.value(s)[0], 0.5);
    assert_eq!(g.value(r)[1], 0.0);
    // 1 / (1 + e^-2) evaluated independently of the clamped implementation.
    let oracle = 1.0 / (1.0 + (-2.0f64).exp());
    assert_abs_diff_eq!(g.value(s)[2], oracle, epsilon = 1e-15);
    assert_abs_diff_eq!(g.value(s)[2], 0.880797, epsilon = 1e-6);
}

#[test]
fn sigmoid_saturates_without_overflow() {
    assert_eq!(sigmoid(1e6), sigmoid(SIGMOID_CLAMP));
    assert_eq!(sigmoid(-1e6), sigmoid(-SIGMOID_CLAMP));
    assert!(sigmoid(-1e300).is_finite() && sigmoid(-1e300) > 0.0);
}

#[test]
fn reduce_examples() {
    let mut g = Graph::new();
    let x = g.param(&t2(&[&[1.0, 5.0], &[3.0, 2.0]]));
    let m = g.reduce(ReduceKind::Max, x, 0).unwrap();
    assert_eq!(g.value(m), &[3.0, 5.0]);

    let v = g.input(&Tensor::from_vec(vec![2.0, 4.0, 6.0]));
    let mean = g.reduce(ReduceKind::Mean, v, 0).unwrap();
    assert_eq!(g.item(mean), 4.0);

    let s = g.sum_all(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
}

#[test]
fn reduce_rejects_bad_axis_and_empty_extent() {
    let mut g = Graph::new();
    let x = g.input(&Tensor::zeros(&[2, 3]));
    assert!(matches!(g.reduce(ReduceKind::Sum, x, 2), Err(Error::Domain(_))));
    let e = g.input(&Tensor::zeros(&[2, 0]));
    assert!(matches!(g.reduce(ReduceKind::Max, e, 1), Err(Error::Domain(_))));
}

#[test]
fn max_backward_routes_to_first_argmax() {
    let mut g = Graph::new();
    let x = g.param(&t2(&[&[4.0, 1.0], &[4.0, 7.0], &[2.0, 7.0]]));
    let m = g.reduce(ReduceKind::Max, x, 0).unwrap();
    let s = g.sum_all(m).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn softmax_xent_examples() {
    let mut g = Graph::new();
    let u = g.input(&Tensor::zeros(&[1, 10]));
    let loss = g.softmax_xent(u, &[3]).unwrap();
    assert!((g.item(loss) - 10f64.ln()).abs() < 1e-12);

    let l = g.input(&t2(&[&[10.0, -10.0]]));
    let loss = g.softmax_xent(l, &[0]).unwrap();
    // -ln(e^10 / (e^10 + e^-10)) = ln(1 + e^-20)
    let oracle = (-20f64).exp().ln_1p();
    assert_abs_diff_eq!(g.item(loss), oracle, epsilon = 1e-20);
    assert!((g.item(loss) - 2.06e-9).abs() < 1e-11);

    assert!(matches!(g.softmax_xent(l, &[2]), Err(Error::Domain(_))));
}

#[test]
fn bce_examples() {
    let mut g = Graph::new();
    let z = g.input(&t2(&[&[0.0]]));
    let pos = g.bce_logits(z, &[1.0]).unwrap();
    let neg = g.bce_logits(z, &[0.0]).unwrap();
    assert_abs_diff_eq!(g.item(pos), 2f64.ln(), epsilon = 1e-15);
    assert_abs_diff_eq!(g.item(neg), 2f64.ln(), epsilon = 1e-15);
    assert!(matches!(g.bce_logits(z, &[0.5]), Err(Error::Domain(_))));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::from_vec(vec![1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum_all(sq).unwrap();
    let other = g.param(&Tensor::from_vec(vec![5.0]));
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    assert!(g.grad(other).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));

    // accumulation across repeated calls
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn adam_examples() {
    let mut params = ParamSet::new();
    let a = params.add("a", Tensor::from_vec(vec![0.5, -0.25]));
    let b = params.add("b", Tensor::from_vec(vec![0.5, -0.25]));
    let mut opt = Adam::new(&params, 1e-3, 1e-4);

    // zero gradient leaves parameters untouched
    opt.step(&mut params, &[a, b]).unwrap();
    assert_eq!(params.get(a).data(), &[0.5, -0.25]);

    // identical params with identical grads stay identical
    for id in [a, b] {
        params.get_mut(id).grad = Some(vec![0.3, -1.2]);
    }
    opt.step(&mut params, &[a, b]).unwrap();
    assert_eq!(params.get(a).data(), params.get(b).data());
    assert_eq!(params.get(a).grad.as_deref(), Some(&[0.0, 0.0][..]));
}

#[test]
fn adam_scalar_first_step() {
    let mut params = ParamSet::new();
    let p = params.add("p", Tensor::scalar(1.0));
    let mut opt = Adam::new(&params, 1e-3, 1e-4);
    params.get_mut(p).grad = Some(vec![1.0]);
    opt.step(&mut params, &[p]).unwrap();
    // m̂ = 1, v̂ = 1 → Δ = lr · 1 / (1 + eps)
    let expected = 1.0 - 1e-3 / (1.0 + 1e-4);
    assert_abs_diff_eq!(params.get(p).item(), expected, epsilon = 1e-15);
}

#[test]
fn adam_missing_grad_is_contract_error() {
    let mut params = ParamSet::new();
    let p = params.add("p", Tensor::scalar(1.0));
    params.get_mut(p).grad = None;
    let mut opt = Adam::new(&params, 1e-3, 1e-4);
    assert!(matches!(opt.step(&mut params, &[p]), Err(Error::Contract(_))));
}

#[test]
fn finite_diff_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[6]);
    let err = finite_diff_check(
        |g, v| {
            let s = g.sigmoid(v);
            g.sum_all(s)
        },
        &x,
        FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "sigmoid err {err}");

    let err = finite_diff_check(
        |g, v| {
            let s = g.scale(v, 3.0)?;
            g.sum_all(s)
        },
        &x,
        FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-7, "linear err {err}");

    let w1 = random_tensor(&mut rng, &[3, 4]);
    let w2 = random_tensor(&mut rng, &[4, 2]);
    let x = random_tensor(&mut rng, &[2, 3]);
    let err = finite_diff_check(
        |g, v| {
            let a = g.input(&w1);
            let b = g.input(&w2);
            let h = g.matmul(v, a)?;
            let h = g.tanh(h);
            let o = g.matmul(h, b)?;
            let o = g.mul(o, o)?;
            g.sum_all(o)
        },
        &x,
        FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "matmul chain err {err}");
}

#[test]
fn every_op_passes_gradient_check() {
    for case in op_suite(11).unwrap() {
        assert!(case.max_rel_err < 1e-4, "{}: max rel err {}", case.name, case.max_rel_err);
    }
}

#[test]
fn clipped_sigmoid_gradient_is_zero_when_closed() {
    let mut g = Graph::new();
    let z = g.param(&Tensor::from_vec(vec![-1.0, 0.0, 1.5]));
    let a = g.clipped_sigmoid(z);
    assert_eq!(g.value(a)[0], 0.0);
    assert_eq!(g.value(a)[1], 0.0);
    let s = g.sum_all(a).unwrap();
    g.backward(s).unwrap();
    let gr = g.grad(z).unwrap();
    assert_eq!(gr[0], 0.0);
    assert_eq!(gr[1], 0.0);
    let y = sigmoid(1.5);
    assert_abs_diff_eq!(gr[2], y * (1.0 - y), epsilon = 1e-15);
}

proptest! {
    #[test]
    fn softmax_xent_uniform_is_ln_l(l in 2usize..64, b in 1usize..5, c in -5.0f64..5.0) {
        let mut g = Graph::new();
        let z = g.input(&Tensor::full(&[b, l], c));
        let labels: Vec<usize> = (0..b).map(|i| i % l).collect();
        let loss = g.softmax_xent(z, &labels).unwrap();
        prop_assert!((g.item(loss) - (l as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn max_backward_sends_one_unit_per_slice(
        data in proptest::collection::vec(-2.0f64..2.0, 12),
        axis in 0usize..3,
    ) {
        let mut g = Graph::new();
        let x = g.param(&Tensor::new(&[2, 3, 2], data).unwrap());
        let m = g.reduce(ReduceKind::Max, x, axis).unwrap();
        let s = g.sum_all(m).unwrap();
        g.backward(s).unwrap();
        let total: f64 = g.grad(x).unwrap().iter().sum();
        prop_assert_eq!(total, g.value(m).len() as f64);
        prop_assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn forward_is_deterministic(data in proptest::collection::vec(-2.0f64..2.0, 6)) {
        let run = || {
            let mut g = Graph::new();
            let x = g.input(&Tensor::new(&[2, 3], data.clone()).unwrap());
            let t = g.transpose(x).unwrap();
            let p = g.matmul(x, t).unwrap();
            let s = g.softmax_last(p).unwrap();
            g.value(s).to_vec()
        };
        prop_assert_eq!(run(), run());
    }
}
