use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles of every parameter of a [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Points `id` at another node, e.g. a probe variable in a gradient check.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.0[id.0] = var;
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    /// Adds every parameter to `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| graph.param(t)).collect())
    }

    /// Adds every parameter to `graph` as a constant (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| graph.constant(t.shape(), t.data().to_vec()).expect("consistent tensor"))
                .collect(),
        )
    }

    /// Binds the parameters for which `trainable` holds as trainable leaves and
    /// the rest as constants.
    pub fn bind_with(&self, graph: &mut Graph, trainable: impl Fn(ParamId) -> bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if trainable(ParamId(i)) {
                        graph.param(t)
                    } else {
                        graph.constant(t.shape(), t.data().to_vec()).expect("consistent tensor")
                    }
                })
                .collect(),
        )
    }

    /// Adds leaf gradients of `graph` into the parameters' gradient buffers.
    pub fn accumulate_grads(&mut self, graph: &Graph, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            let len = t.len();
            let buf = t.grad.get_or_insert_with(|| vec![0.0; len]);
            if let Some(g) = graph.grad(v) {
                for (d, s) in buf.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// Adam with bias correction. Moment buffers cover the whole parameter set;
/// [`Adam::step`] updates only the ids it is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub eps: f64,
    pub betas: (f64, f64),
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, eps: f64) -> Self {
        Self {
            lr,
            eps,
            betas: (0.9, 0.999),
            t: 0,
            m: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// One update of `ids`, then zeroes their gradients.
    pub fn step(&mut self, params: &mut ParamSet, ids: &[ParamId]) -> Result<()> {
        self.step_groups(params, &[(ids, 1.0)])
    }

    /// One update in which each group of ids uses `lr · scale`.
    pub fn step_groups(&mut self, params: &mut ParamSet, groups: &[(&[ParamId], f64)]) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer state covers {} tensors, parameter set has {}",
                self.m.len(),
                params.len()
            )));
        }
        for &id in groups.iter().flat_map(|(ids, _)| ids.iter()) {
            let t = &params.tensors[id.0];
            if t.grad.is_none() {
                return Err(Error::Contract(format!(
                    "parameter {} has no gradient",
                    params.names[id.0]
                )));
            }
            if self.m[id.0].len() != t.len() {
                return Err(Error::Contract(format!(
                    "moment shape mismatch for {}",
                    params.names[id.0]
                )));
            }
        }
        self.t += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for &(ids, scale) in groups {
            let lr = self.lr * scale;
            for &id in ids {
                let t = &mut params.tensors[id.0];
                let grad = t.grad.as_mut().expect("checked above");
                let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
                let data = t.data.as_mut_slice();
                for i in 0..data.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                    grad[i] = 0.0;
                }
            }
        }
        Ok(())
    }
}
