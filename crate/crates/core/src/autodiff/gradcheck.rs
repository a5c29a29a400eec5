use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::graph::{EwiseOp, Graph, ReduceKind, Var};
use super::tensor::Tensor;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a kink lies inside the stencil.
    pub excluded: usize,
}

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest relative error and coordinate counts of one check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub excluded: usize,
}

/// Compares the analytic gradient of a scalar-valued `f` at `x` with the
/// fourth-order five-point central difference
/// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`.
///
/// A coordinate whose estimates at steps `h` and `h/2` disagree by more than
/// `1e-5` (relative) has a kink or threshold within `2h` and is excluded.
pub fn finite_diff_report<F>(f: F, x: &Tensor, h: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut graph = Graph::new();
    let xv = graph.param(x);
    let loss = f(&mut graph, xv)?;
    graph.backward(loss)?;
    let analytic = graph
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(probe);
        let out = f(&mut g, v)?;
        Ok(g.item(out))
    };

    let mut report = FdReport { max_rel_err: 0.0, checked: 0, excluded: 0 };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        let mut stencil = |h: f64| -> Result<f64> {
            let mut at = |d: f64| -> Result<f64> {
                probe.data_mut()[i] = orig + d;
                eval(&probe)
            };
            let (m2, m1, p1, p2) = (at(-2.0 * h)?, at(-h)?, at(h)?, at(2.0 * h)?);
            probe.data_mut()[i] = orig;
            Ok((m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h))
        };
        let numeric = stencil(h)?;
        if rel_err(numeric, stencil(h / 2.0)?) > 1e-5 {
            report.excluded += 1;
            continue;
        }
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel_err(analytic[i], numeric));
    }
    Ok(report)
}

/// [`finite_diff_report`]'s largest relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    Ok(finite_diff_report(f, x, h)?.max_rel_err)
}

/// Draws inputs in [-2, 2] that stay at least 1e-3 away from the relu kink
/// and from ties inside any reduced slice.
fn safe_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 1e-2 {
            *v += 0.05;
        }
    }
    t
}

/// Finite-difference checks of every differentiable graph operation on
/// random inputs kept away from kinks and ties.
pub fn op_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let other = random_tensor(&mut rng, &[3, 4]);
    let rhs = random_tensor(&mut rng, &[4, 5]);
    let rowscale = random_tensor(&mut rng, &[3]);
    let weights = random_tensor(&mut rng, &[3, 4]);

    type Case<'a> = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph, Var) -> Result<Var> + 'a>);
    let cases: Vec<Case> = vec![
        ("matmul_lhs", vec![3, 4], Box::new(|g, v| {
            let b = g.input(&rhs);
            let o = g.matmul(v, b)?;
            let w = g.input(&random_like(&[3, 5]));
            let o = g.mul(o, w)?;
            g.sum_all(o)
        })),
        ("matmul_rhs", vec![4, 5], Box::new(|g, v| {
            let a = g.input(&other);
            let o = g.matmul(a, v)?;
            let o = g.tanh(o);
            g.sum_all(o)
        })),
        ("add", vec![3, 4], Box::new(|g, v| {
            let b = g.input(&other);
            let o = g.add(v, b)?;
            let o = g.mul(o, o)?;
            g.sum_all(o)
        })),
        ("sub", vec![3, 4], Box::new(|g, v| {
            let b = g.input(&other);
            let o = g.sub(b, v)?;
            let o = g.mul(o, o)?;
            g.sum_all(o)
        })),
        ("mul", vec![3, 4], Box::new(|g, v| {
            let b = g.input(&weights);
            let o = g.mul(v, b)?;
            let o = g.sigmoid(o);
            g.sum_all(o)
        })),
        ("scale", vec![3, 4], Box::new(|g, v| {
            let o = g.scale(v, -1.7)?;
            let o = g.tanh(o);
            g.sum_all(o)
        })),
        ("add_scalar", vec![3, 4], Box::new(|g, v| {
            let o = g.ewise(EwiseOp::Add, v, 0.3)?;
            let o = g.sigmoid(o);
            g.sum_all(o)
        })),
        ("row_bias", vec![4], Box::new(|g, v| {
            let x = g.input(&other);
            let o = g.add_row_bias(x, v)?;
            let o = g.tanh(o);
            g.sum_all(o)
        })),
        ("scale_rows_s", vec![3], Box::new(|g, v| {
            let x = g.input(&other);
            let o = g.scale_rows(x, v)?;
            let o = g.tanh(o);
            g.sum_all(o)
        })),
        ("scale_rows_x", vec![3, 4], Box::new(|g, v| {
            let s = g.input(&rowscale);
            let o = g.scale_rows(v, s)?;
            let o = g.tanh(o);
            g.sum_all(o)
        })),
        ("sigmoid", vec![3, 4], Box::new(|g, v| {
            let w = g.input(&weights);
            let o = g.sigmoid(v);
            let o = g.mul(o, w)?;
            g.sum_all(o)
        })),
        ("relu", vec![3, 4], Box::new(|g, v| {
            let w = g.input(&weights);
            let o = g.relu(v);
            let o = g.mul(o, w)?;
            g.sum_all(o)
        })),
        ("tanh", vec![3, 4], Box::new(|g, v| {
            let w = g.input(&weights);
            let o = g.tanh(v);
            let o = g.mul(o, w)?;
            g.sum_all(o)
        })),
        ("reduce_sum", vec![3, 4], Box::new(|g, v| {
            let o = g.reduce(ReduceKind::Sum, v, 1)?;
            let o = g.mul(o, o)?;
            g.sum_all(o)
        })),
        ("reduce_mean", vec![3, 4], Box::new(|g, v| {
            let o = g.reduce(ReduceKind::Mean, v, 0)?;
            let o = g.mul(o, o)?;
            g.sum_all(o)
        })),
        ("reduce_max", vec![3, 4], Box::new(|g, v| {
            let o = g.reduce(ReduceKind::Max, v, 0)?;
            let o = g.mul(o, o)?;
            g.sum_all(o)
        })),
        ("softmax_last", vec![3, 4], Box::new(|g, v| {
            let w = g.input(&weights);
            let o = g.softmax_last(v)?;
            let o = g.mul(o, w)?;
            g.sum_all(o)
        })),
        ("softmax_xent", vec![3, 4], Box::new(|g, v| g.softmax_xent(v, &[0, 3, 1]))),
        ("bce_logits", vec![3, 4], Box::new(|g, v| {
            g.bce_logits(v, &[1., 0., 0., 1., 1., 1., 0., 0., 0., 1., 0., 1.])
        })),
        ("gather_rows", vec![3, 4], Box::new(|g, v| {
            let o = g.gather_rows(v, &[2, 0, 2])?;
            let o = g.mul(o, o)?;
            g.sum_all(o)
        })),
        ("segment_max", vec![5, 2], Box::new(|g, v| {
            let o = g.segment_max(v, &[2, 3])?;
            let o = g.mul(o, o)?;
            g.sum_all(o)
        })),
        ("transpose", vec![3, 4], Box::new(|g, v| {
            let o = g.transpose(v)?;
            let b = g.input(&other);
            let o = g.matmul(o, b)?;
            let o = g.tanh(o);
            g.sum_all(o)
        })),
        ("bmm", vec![2, 3, 4], Box::new(|g, v| {
            let b = g.input(&random_like(&[2, 4, 2]));
            let o = g.bmm(v, b, false)?;
            let o = g.tanh(o);
            g.sum_all(o)
        })),
        ("bmm_trans_b", vec![2, 3, 4], Box::new(|g, v| {
            let a = g.input(&random_like(&[2, 5, 4]));
            let o = g.bmm(a, v, true)?;
            let o = g.tanh(o);
            g.sum_all(o)
        })),
    ];

    cases
        .into_iter()
        .map(|(name, shape, f)| {
            let x = safe_tensor(&mut rng, &shape);
            let r = finite_diff_report(&*f, &x, FD_STEP)?;
            Ok(GradCase {
                name: name.to_string(),
                max_rel_err: r.max_rel_err,
                checked: r.checked,
                excluded: r.excluded,
            })
        })
        .collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("shape and data agree")
}

fn random_like(shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    random_tensor(&mut rng, shape)
}
