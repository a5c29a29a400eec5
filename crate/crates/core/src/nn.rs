//! Small layer helpers shared by the selector, classifier and baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::{dim_err, Result};

/// Tensor with entries drawn uniformly from `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Fully connected layer `x · W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = params.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], bound));
        let bias = params.add(format!("{name}.bias"), uniform(rng, &[fan_out], bound));
        Self { weight, bias, fan_in, fan_out }
    }

    /// `x: [R, in]` → `[R, out]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.fan_in {
            return Err(dim_err("linear", g.shape(x), &[self.fan_in, self.fan_out]));
        }
        let h = g.matmul(x, p[self.weight])?;
        g.add_row_bias(h, p[self.bias])
    }
}

/// Two linear layers with a relu in between.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp2 {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp2 {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let (i, h, o) = dims;
        Self {
            hidden: Linear::new(params, &format!("{name}.0"), i, h, rng),
            out: Linear::new(params, &format!("{name}.1"), h, o, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.relu(h);
        self.out.forward(g, p, h)
    }

    /// Exact multiply-add count of one row through both layers.
    pub fn macs_per_row(&self) -> u64 {
        (self.hidden.fan_in * self.hidden.fan_out + self.out.fan_in * self.out.fan_out) as u64
    }
}
