//! Per-timestep gating.
//!
//! A timestep feature `x` is compared against a bank of concept kernels,
//! `s = K · x`, and a two-layer MLP turns the similarity vector into one
//! gating logit `α`. During training logistic noise `G` is added and the
//! clipped sigmoid keeps `sigmoid(α + G)` only where it exceeds 0.5. At
//! inference the gate is the step function `α > 0`.
//!
//! Because `G` is logistic, `P(sigmoid(α + G) > 0.5) = sigmoid(α)`: the
//! probability that a gate opens is exactly the sigmoid of its logit. The
//! sparsity penalty is the expected number of open gates, `λ · mean σ(α)`.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Linear, Mlp2};

/// Gates open strictly above this activated value.
pub const GATE_THRESHOLD: f64 = 0.5;

/// Learnable concept kernels, one row per kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptBank {
    pub kernels: ParamId,
    pub n: usize,
    pub channels: usize,
}

impl ConceptBank {
    pub fn new(params: &mut ParamSet, name: &str, n: usize, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 || channels == 0 {
            return Err(Error::Domain("concept bank needs N >= 1 and C >= 1".into()));
        }
        let bound = 1.0 / (channels as f64).sqrt();
        let kernels = params.add(name, crate::nn::uniform(rng, &[n, channels], bound));
        Ok(Self { kernels, n, channels })
    }
}

/// Similarity of every row of `x: [R, C]` (or a single `x: [C]`) with every
/// kernel of `kernels: [N, C]`, giving `[R, N]` (or `[N]`).
pub fn similarity(g: &mut Graph, x: Var, kernels: Var) -> Result<Var> {
    let (n, c) = match g.shape(kernels) {
        [n, c] => (*n, *c),
        other => return Err(dim_err("similarity", other, &[0, 0])),
    };
    let single = g.shape(x).len() == 1;
    let xs = if single {
        if g.shape(x)[0] != c {
            return Err(dim_err("similarity", g.shape(x), &[n, c]));
        }
        g.reshape(x, &[1, c])?
    } else {
        if g.shape(x).len() != 2 || g.shape(x)[1] != c {
            return Err(dim_err("similarity", g.shape(x), &[n, c]));
        }
        x
    };
    let kt = g.transpose(kernels)?;
    let s = g.matmul(xs, kt)?;
    if single {
        g.reshape(s, &[n])
    } else {
        Ok(s)
    }
}

/// Two-layer MLP `N → H_g → 1` producing one logit per timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatingMlp {
    pub mlp: Mlp2,
}

impl GatingMlp {
    /// `bias_init` sets the output bias so gates start with logit ≈ bias_init.
    pub fn new(params: &mut ParamSet, name: &str, n: usize, hidden: usize, bias_init: f64, rng: &mut impl Rng) -> Self {
        let mlp = Mlp2 {
            hidden: Linear::new(params, &format!("{name}.0"), n, hidden, rng),
            out: Linear::new(params, &format!("{name}.1"), hidden, 1, rng),
        };
        params.get_mut(mlp.out.bias).data_mut()[0] = bias_init;
        Self { mlp }
    }

    pub fn n(&self) -> usize {
        self.mlp.hidden.fan_in
    }
}

/// `α = W2ᵀ relu(W1ᵀ s + b1) + b2` for each row of `s: [R, N]` → `[R]`;
/// a single `s: [N]` gives a scalar.
pub fn gate_logit(g: &mut Graph, s: Var, mlp: &GatingMlp, p: &Bound) -> Result<Var> {
    let n = mlp.n();
    let single = g.shape(s).len() == 1;
    let rows = if single {
        if g.shape(s)[0] != n {
            return Err(dim_err("gate_logit", g.shape(s), &[n]));
        }
        g.reshape(s, &[1, n])?
    } else {
        s
    };
    let out = mlp.mlp.forward(g, p, rows)?;
    let r = g.shape(out)[0];
    if single {
        g.reshape(out, &[])
    } else {
        g.reshape(out, &[r])
    }
}

/// `G = G1 − G2` with `G1, G2 ~ Gumbel(0, 1)`, i.e. one Logistic(0, 1) draw.
pub fn sample_gate_noise(rng: &mut impl Rng) -> f64 {
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel parameters");
    gumbel.sample(rng) - gumbel.sample(rng)
}

/// Outcome of gating one timestep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub logit: f64,
    pub value: f64,
    pub open: bool,
    pub noise_used: bool,
}

impl GateDecision {
    /// Training-mode gate: clipped sigmoid of the perturbed logit.
    pub fn train(logit: f64, noise: f64) -> Self {
        let g = sigmoid(logit + noise);
        let open = g > GATE_THRESHOLD;
        Self {
            logit,
            value: if open { g } else { 0.0 },
            open,
            noise_used: true,
        }
    }

    /// Inference-mode gate: step function at `sigmoid(α) > 0.5`.
    pub fn test(logit: f64) -> Self {
        let open = sigmoid(logit) > GATE_THRESHOLD;
        Self {
            logit,
            value: if open { 1.0 } else { 0.0 },
            open,
            noise_used: false,
        }
    }
}

/// Training activation over logits `alpha: [R]` (or a scalar) with one noise
/// draw per entry. Returns the differentiable activated values and the
/// per-entry decisions.
pub fn activate_train(g: &mut Graph, alpha: Var, noise: &[f64]) -> Result<(Var, Vec<GateDecision>)> {
    let shape = g.shape(alpha).to_vec();
    if noise.len() != g.value(alpha).len() {
        return Err(dim_err("activate_train", &shape, &[noise.len()]));
    }
    let nz = g.constant(&shape, noise.to_vec())?;
    let z = g.add(alpha, nz)?;
    let a = g.clipped_sigmoid(z);
    let decisions = g
        .value(alpha)
        .iter()
        .zip(noise)
        .zip(g.value(a))
        .map(|((&l, &n), &v)| {
            let d = GateDecision::train(l, n);
            debug_assert_eq!(d.value, v);
            d
        })
        .collect();
    Ok((a, decisions))
}

/// Inference activation: binary gates, no noise, no gradient.
pub fn activate_test(logits: &[f64]) -> Vec<GateDecision> {
    logits.iter().map(|&l| GateDecision::test(l)).collect()
}

/// Scales each row of `x` by its activated gate value; a closed gate yields
/// an exact zero row.
pub fn apply_gate(g: &mut Graph, x: Var, activated: Var) -> Result<Var> {
    g.scale_rows(x, activated)
}

/// Expected-open-gate penalty `λ · mean(sigmoid(α))`.
pub fn l0_penalty(g: &mut Graph, alpha: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("L0 weight must be >= 0, got {lambda}")));
    }
    let p = g.sigmoid(alpha);
    let m = g.mean_all(p)?;
    g.scale(m, lambda)
}

/// Convenience for tests and reports: constant tensor of gate values.
pub fn decisions_tensor(decisions: &[GateDecision]) -> Tensor {
    Tensor::from_vec(decisions.iter().map(|d| d.value).collect())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{finite_diff_check, FD_STEP};

    fn bank(g: &mut Graph, rows: &[&[f64]]) -> Var {
        g.input(&Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn similarity_examples() {
        let mut g = Graph::new();
        let k = bank(&mut g, &[&[1.0, 0.0], &[0.0, 2.0]]);
        let zero = g.input(&Tensor::zeros(&[2]));
        let s = similarity(&mut g, zero, k).unwrap();
        assert_eq!(g.value(s), &[0.0, 0.0]);

        let x = g.input(&Tensor::from_vec(vec![3.0, 4.0]));
        let s = similarity(&mut g, x, k).unwrap();
        // dot of each kernel row with x
        let oracle = [1.0 * 3.0 + 0.0 * 4.0, 0.0 * 3.0 + 2.0 * 4.0];
        assert_eq!(g.value(s), &oracle);

        let x5 = g.scale(x, 5.0).unwrap();
        let s5 = similarity(&mut g, x5, k).unwrap();
        assert_eq!(g.value(s5), &[15.0, 40.0]);
    }

    #[test]
    fn similarity_channel_mismatch() {
        let mut g = Graph::new();
        let k = bank(&mut g, &[&[1.0, 0.0, 0.0]]);
        let x = g.input(&Tensor::zeros(&[2]));
        assert!(matches!(similarity(&mut g, x, k), Err(Error::Dimension { .. })));
    }

    fn hand_mlp() -> (ParamSet, GatingMlp) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = GatingMlp::new(&mut params, "gate", 2, 2, 0.0, &mut rng);
        let set = |p: &mut ParamSet, id, v: &[f64]| p.get_mut(id).data_mut().copy_from_slice(v);
        set(&mut params, mlp.mlp.hidden.weight, &[1.0, -1.0, 2.0, 0.5]);
        set(&mut params, mlp.mlp.hidden.bias, &[0.1, -0.2]);
        set(&mut params, mlp.mlp.out.weight, &[1.5, -2.0]);
        set(&mut params, mlp.mlp.out.bias, &[0.3]);
        (params, mlp)
    }

    #[test]
    fn gate_logit_examples() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = GatingMlp::new(&mut params, "gate", 3, 4, 0.0, &mut rng);
        for id in params.ids().collect::<Vec<_>>() {
            params.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let s = g.input(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let a = gate_logit(&mut g, s, &mlp, &p).unwrap();
        assert_eq!(g.shape(a), &[] as &[usize]);
        assert_eq!(g.item(a), 0.0);

        // hand forward: h = relu([1,2]·W1 + b1), W1 = [[1,-1],[2,0.5]]
        // pre = [1+4+0.1, -1+1-0.2] = [5.1, -0.2] → h = [5.1, 0]
        // α = 1.5·5.1 - 2·0 + 0.3 = 7.95
        let (params, mlp) = hand_mlp();
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let s = g.input(&Tensor::from_vec(vec![1.0, 2.0]));
        let a = gate_logit(&mut g, s, &mlp, &p).unwrap();
        assert_abs_diff_eq!(g.item(a), 7.95, epsilon = 1e-12);
    }

    #[test]
    fn gate_logit_gradient_wrt_similarity() {
        let (params, mlp) = hand_mlp();
        let s = Tensor::from_vec(vec![0.9, -0.4]);
        let err = finite_diff_check(
            |g, v| {
                let p = params.bind_frozen(g);
                gate_logit(g, v, &mlp, &p)
            },
            &s,
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gate_logit_dimension_error() {
        let (params, mlp) = hand_mlp();
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let s = g.input(&Tensor::zeros(&[3]));
        assert!(gate_logit(&mut g, s, &mlp, &p).is_err());
    }

    #[test]
    fn noise_is_reproducible_and_centred() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| sample_gate_noise(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));

        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| sample_gate_noise(&mut rng)).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let positive = samples.iter().filter(|&&v| v > 0.0).count() as f64 / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((positive - 0.5).abs() < 0.01, "P(G>0) {positive}");
    }

    #[test]
    fn activate_train_examples() {
        let d = GateDecision::train(2.0, 0.0);
        assert!(d.open);
        assert_abs_diff_eq!(d.value, 1.0 / (1.0 + (-2.0f64).exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(d.value, 0.880797, epsilon = 1e-6);

        let d = GateDecision::train(-2.0, 0.0);
        assert!(!d.open);
        assert_eq!(d.value, 0.0);

        let d = GateDecision::train(0.0, 0.0);
        assert!(!d.open, "exact 0.5 closes the gate");
        assert_eq!(d.value, 0.0);
    }

    #[test]
    fn activate_test_examples() {
        assert_eq!(GateDecision::test(3.0).value, 1.0);
        assert_eq!(GateDecision::test(-3.0).value, 0.0);
        assert_eq!(GateDecision::test(0.0).value, 0.0);
        assert!(!GateDecision::test(0.0).noise_used);
    }

    #[test]
    fn activate_train_graph_matches_scalar_rule_and_gradient() {
        let mut g = Graph::new();
        let alpha = g.param(&Tensor::from_vec(vec![2.0, -2.0, 0.3]));
        let (a, ds) = activate_train(&mut g, alpha, &[0.0, 0.0, 0.5]).unwrap();
        assert_eq!(ds.iter().map(|d| d.open).collect::<Vec<_>>(), vec![true, false, true]);
        let s = g.sum_all(a).unwrap();
        g.backward(s).unwrap();
        let gr = g.grad(alpha).unwrap();
        let y = sigmoid(2.0);
        assert_abs_diff_eq!(gr[0], y * (1.0 - y), epsilon = 1e-15);
        assert_eq!(gr[1], 0.0);
        let y = sigmoid(0.8);
        assert_abs_diff_eq!(gr[2], y * (1.0 - y), epsilon = 1e-15);
    }

    #[test]
    fn apply_gate_examples() {
        let x = Tensor::from_rows(&[&[1.0, -2.0, 3.0]]).unwrap();
        let mut g = Graph::new();
        let xv = g.param(&x);

        let closed = g.constant(&[1], vec![0.0]).unwrap();
        let out = apply_gate(&mut g, xv, closed).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));
        let s = g.sum_all(out).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(xv).unwrap().iter().all(|&v| v == 0.0));

        let open = g.constant(&[1], vec![1.0]).unwrap();
        let out = apply_gate(&mut g, xv, open).unwrap();
        assert_eq!(g.value(out), x.data());

        let soft = g.constant(&[1], vec![0.9]).unwrap();
        let out = apply_gate(&mut g, xv, soft).unwrap();
        let oracle: Vec<f64> = x.data().iter().map(|v| 0.9 * v).collect();
        assert_eq!(g.value(out), oracle.as_slice());
    }

    #[test]
    fn l0_penalty_examples() {
        let mut g = Graph::new();
        let a = g.input(&Tensor::from_vec(vec![0.7, -1.0, 3.0]));
        let p = l0_penalty(&mut g, a, 0.0).unwrap();
        assert_eq!(g.item(p), 0.0);

        let z = g.input(&Tensor::zeros(&[5]));
        let p = l0_penalty(&mut g, z, 1.0).unwrap();
        assert_eq!(g.item(p), 0.5);

        let sat = g.input(&Tensor::from_vec(vec![-40.0, 40.0]));
        let p = l0_penalty(&mut g, sat, 1.0).unwrap();
        let oracle = (1.0 / (1.0 + 40f64.exp()) + 1.0 / (1.0 + (-40f64).exp())) / 2.0;
        assert_abs_diff_eq!(g.item(p), oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(g.item(p), 0.5, epsilon = 1e-12);

        assert!(matches!(l0_penalty(&mut g, a, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn l0_penalty_gradient_check() {
        let a = Tensor::from_vec(vec![0.3, -1.2, 1.9, -0.4]);
        let err = finite_diff_check(|g, v| l0_penalty(g, v, 2.5), &a, FD_STEP).unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn open_frequency_matches_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for alpha in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let n = 100_000;
            let open = (0..n)
                .filter(|_| GateDecision::train(alpha, sample_gate_noise(&mut rng)).open)
                .count() as f64
                / n as f64;
            assert!((open - sigmoid(alpha)).abs() < 0.02, "α={alpha}: {open}");
        }
    }

    proptest! {
        #[test]
        fn noise_free_train_matches_test(alpha in -50.0f64..50.0) {
            prop_assert_eq!(GateDecision::train(alpha, 0.0).open, GateDecision::test(alpha).open);
        }

        #[test]
        fn activation_ranges(alpha in -50.0f64..50.0, noise in -10.0f64..10.0) {
            let t = GateDecision::train(alpha, noise);
            prop_assert!(t.value == 0.0 || (t.value > 0.5 && t.value <= 1.0));
            prop_assert_eq!(t.open, t.value > 0.0);
            let s = GateDecision::test(alpha);
            prop_assert!(s.value == 0.0 || s.value == 1.0);
            prop_assert_eq!(s.open, s.value == 1.0);
        }

        #[test]
        fn test_gate_monotone(a in -50.0f64..50.0, d in 0.0f64..10.0) {
            prop_assert!(GateDecision::test(a + d).open as u8 >= GateDecision::test(a).open as u8);
        }

        #[test]
        fn l0_strictly_increasing(vals in proptest::collection::vec(-30.0f64..30.0, 1..6), i in 0usize..6, bump in 0.01f64..1.0) {
            let i = i % vals.len();
            let eval = |v: &[f64]| {
                let mut g = Graph::new();
                let a = g.input(&Tensor::from_vec(v.to_vec()));
                let p = l0_penalty(&mut g, a, 1.0).unwrap();
                g.item(p)
            };
            let mut up = vals.clone();
            up[i] += bump;
            prop_assert!(eval(&up) > eval(&vals));
        }
    }
}
