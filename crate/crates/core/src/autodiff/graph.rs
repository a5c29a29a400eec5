//! Reverse-mode computation record.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Nodes only reference earlier nodes, so
//! insertion order is a topological order and the backward sweep is a single
//! reverse scan.

use crate::error::{dim_err, Error, Result};

use super::tensor::{numel, Tensor};

/// Exponent arguments of the logistic function are clamped to this range.
pub const SIGMOID_CLAMP: f64 = 40.0;

/// Logistic function with the exponent argument clamped to `[-40, 40]`.
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP)).exp())
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwiseOp {
    Add,
    Sub,
    Mul,
    /// Multiplication by a scalar constant.
    Scale,
}

/// Right-hand operand of [`Graph::ewise`].
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

impl From<Var> for Operand {
    fn from(v: Var) -> Self {
        Operand::Var(v)
    }
}

impl From<f64> for Operand {
    fn from(s: f64) -> Self {
        Operand::Scalar(s)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, p: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, p: usize, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBias { x: Var, bias: Var, cols: usize },
    ScaleRows { x: Var, s: Var, cols: usize },
    Act(Activation, Var),
    ClippedSigmoid(Var),
    Reduce { kind: ReduceKind, x: Var, outer: usize, n: usize, inner: usize, argmax: Vec<usize> },
    SoftmaxLast { x: Var, cols: usize },
    SoftmaxXent { logits: Var, probs: Vec<f64>, labels: Vec<usize>, cols: usize },
    BceLogits { logits: Var, targets: Vec<f64> },
    GatherRows { x: Var, idx: Vec<usize>, cols: usize },
    SegmentMax { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    Transpose { x: Var, rows: usize, cols: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// The computation record: an ordered list of nodes plus accumulated
/// gradients of its leaves.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents match (m, k, n) under the
    // given strides; `c` is a dense row-major m×n block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf carrying a copy of `t`; it takes part in gradient
    /// computation iff `t.requires_grad`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Adds a trainable leaf regardless of `t.requires_grad`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(dim_err("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Accumulated gradient of a leaf, available after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut() {
            *g = None;
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(dim_err(op, other, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, p) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * p];
        gemm(
            m,
            k,
            p,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (p as isize, 1),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, p], out, Op::MatMul { a, b, m, k, p }, rg))
    }

    /// Batched product of `[B, M, K]` with `[B, K, P]` (or `[B, P, K]` when
    /// `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, p) = match (sa.as_slice(), sb.as_slice()) {
            ([ba, m, k], [bb, x, y]) if ba == bb => {
                let (kb, p) = if trans_b { (*y, *x) } else { (*x, *y) };
                if kb != *k {
                    return Err(dim_err("bmm", &sa, &sb));
                }
                (*ba, *m, *k, p)
            }
            _ => return Err(dim_err("bmm", &sa, &sb)),
        };
        let mut out = vec![0.0; batch * m * p];
        let bs = if trans_b { (1, k as isize) } else { (p as isize, 1) };
        for i in 0..batch {
            let av = &self.value(a)[i * m * k..(i + 1) * m * k];
            let bv = &self.value(b)[i * k * p..(i + 1) * k * p];
            gemm(m, k, p, av, (k as isize, 1), bv, bs, &mut out[i * m * p..(i + 1) * m * p], 0.0);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![batch, m, p],
            out,
            Op::Bmm { a, b, batch, m, k, p, trans_b },
            rg,
        ))
    }

    /// Elementwise operation on equal shapes, or against a scalar constant.
    pub fn ewise(&mut self, op: EwiseOp, a: Var, b: impl Into<Operand>) -> Result<Var> {
        match (op, b.into()) {
            (EwiseOp::Scale | EwiseOp::Mul, Operand::Scalar(s)) => {
                let out = self.value(a).iter().map(|x| x * s).collect();
                let rg = self.rg(a);
                Ok(self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), rg))
            }
            (EwiseOp::Add, Operand::Scalar(s)) => {
                let out = self.value(a).iter().map(|x| x + s).collect();
                let rg = self.rg(a);
                Ok(self.push(self.shape(a).to_vec(), out, Op::AddScalar(a), rg))
            }
            (EwiseOp::Sub, Operand::Scalar(s)) => self.ewise(EwiseOp::Add, a, -s),
            (EwiseOp::Scale, Operand::Var(_)) => Err(Error::Contract(
                "scale takes a scalar operand".into(),
            )),
            (op, Operand::Var(b)) => {
                if self.shape(a) != self.shape(b) {
                    return Err(dim_err("ewise", self.shape(a), self.shape(b)));
                }
                let (av, bv) = (self.value(a), self.value(b));
                let out: Vec<f64> = match op {
                    EwiseOp::Add => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
                    EwiseOp::Sub => av.iter().zip(bv).map(|(x, y)| x - y).collect(),
                    EwiseOp::Mul => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
                    EwiseOp::Scale => unreachable!(),
                };
                let node = match op {
                    EwiseOp::Add => Op::Add(a, b),
                    EwiseOp::Sub => Op::Sub(a, b),
                    _ => Op::Mul(a, b),
                };
                let rg = self.rg(a) || self.rg(b);
                Ok(self.push(self.shape(a).to_vec(), out, node, rg))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(EwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(EwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(EwiseOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.ewise(EwiseOp::Scale, a, s)
    }

    /// Adds a `[C]` bias to every row of an `[R, C]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_row_bias")?;
        if self.shape(bias) != [c] {
            return Err(dim_err("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c.max(1)).take(r) {
            axpy(row, bv);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(vec![r, c], out, Op::AddRowBias { x, bias, cols: c }, rg))
    }

    /// Multiplies row `r` of `x` (leading extent R, any trailing shape) by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| dim_err("scale_rows", &shape, self.shape(s)))?;
        if self.shape(s) != [rows] {
            return Err(dim_err("scale_rows", &shape, self.shape(s)));
        }
        let cols = numel(&shape).checked_div(rows).unwrap_or(0);
        let sv = self.value(s);
        let mut out = self.value(x).to_vec();
        if cols > 0 {
            for (row, f) in out.chunks_mut(cols).zip(sv) {
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(shape, out, Op::ScaleRows { x, s, cols }, rg))
    }

    pub fn activation(&mut self, kind: Activation, z: Var) -> Var {
        let out = self
            .value(z)
            .iter()
            .map(|&v| match kind {
                Activation::Sigmoid => sigmoid(v),
                Activation::Relu => v.max(0.0),
                Activation::Tanh => v.tanh(),
            })
            .collect();
        let rg = self.rg(z);
        self.push(self.shape(z).to_vec(), out, Op::Act(kind, z), rg)
    }

    pub fn sigmoid(&mut self, z: Var) -> Var {
        self.activation(Activation::Sigmoid, z)
    }

    pub fn relu(&mut self, z: Var) -> Var {
        self.activation(Activation::Relu, z)
    }

    pub fn tanh(&mut self, z: Var) -> Var {
        self.activation(Activation::Tanh, z)
    }

    /// `sigmoid(z)` where it exceeds 0.5, exactly zero elsewhere. The clip
    /// mask is a constant of the forward pass: gradient flows through the
    /// sigmoid of open entries only.
    pub fn clipped_sigmoid(&mut self, z: Var) -> Var {
        let out = self
            .value(z)
            .iter()
            .map(|&v| {
                let g = sigmoid(v);
                if g > 0.5 {
                    g
                } else {
                    0.0
                }
            })
            .collect();
        let rg = self.rg(z);
        self.push(self.shape(z).to_vec(), out, Op::ClippedSigmoid(z), rg)
    }

    /// Reduces `x` along `axis`, dropping that axis.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Domain(format!(
                "reduce axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let n = shape[axis];
        if n == 0 {
            return Err(Error::Domain(format!("reduce over empty axis {axis}")));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        axpy(&mut out[o * inner..(o + 1) * inner], &xv[base..base + inner]);
                    }
                }
                if kind == ReduceKind::Mean {
                    out.iter_mut().for_each(|v| *v /= n as f64);
                }
            }
            ReduceKind::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = 0;
                        let mut bv = xv[o * n * inner + i];
                        for j in 1..n {
                            let v = xv[(o * n + j) * inner + i];
                            if v > bv {
                                bv = v;
                                best = j;
                            }
                        }
                        out[o * inner + i] = bv;
                        argmax[o * inner + i] = (o * n + best) * inner + i;
                    }
                }
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(
            oshape,
            out,
            Op::Reduce { kind, x, outer, n, inner, argmax },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let flat = self.reshape(x, &[self.value(x).len()])?;
        self.reduce(ReduceKind::Sum, flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let flat = self.reshape(x, &[self.value(x).len()])?;
        self.reduce(ReduceKind::Mean, flat, 0)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(dim_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "transpose")?;
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = xv[r * cols + c];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let cols = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::Domain("softmax of a scalar".into()))?;
        if cols == 0 {
            return Err(Error::Domain("softmax over empty axis".into()));
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::SoftmaxLast { x, cols }, rg))
    }

    /// Mean softmax cross-entropy of `[B, L]` logits against class indices.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, l) = self.dims2(logits, "softmax_xent")?;
        if labels.len() != b {
            return Err(dim_err("softmax_xent", &[b, l], &[labels.len()]));
        }
        if b == 0 {
            return Err(Error::Domain("softmax_xent over empty batch".into()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= l) {
            return Err(Error::Domain(format!("label {bad} outside [0, {l})")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(l).zip(labels) {
            // -ln p_y = (m - z_y) + ln(e^(z_y - m) + Σ_{j≠y} e^(z_j - m)), with ln_1p
            // so a confidently-correct row keeps its tiny loss exactly.
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, v)| (v - max).exp())
                .sum();
            loss += (max - row[y]) + ((row[y] - max).exp_m1() + rest).ln_1p();
            softmax_in_place(row);
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::SoftmaxXent { logits, probs, labels: labels.to_vec(), cols: l },
            rg,
        ))
    }

    /// Mean binary cross-entropy with logits over all `B·L` entries.
    pub fn bce_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n {
            return Err(dim_err("bce_logits", self.shape(logits), &[targets.len()]));
        }
        if n == 0 {
            return Err(Error::Domain("bce_logits over empty input".into()));
        }
        if let Some(bad) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Domain(format!("non-binary target {bad}")));
        }
        let loss = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::BceLogits { logits, targets: targets.to_vec() },
            rg,
        ))
    }

    /// Selects rows of a matrix (or of any tensor along its leading axis).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| dim_err("gather_rows", &shape, &[]))?;
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!("row {bad} out of range {rows}")));
        }
        let cols = numel(&shape[1..]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        let mut oshape = shape;
        oshape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(oshape, out, Op::GatherRows { x, idx: idx.to_vec(), cols }, rg))
    }

    /// Column-wise max over consecutive row groups of an `[R, C]` matrix.
    /// `lens` gives the number of rows in each group; every group must be
    /// non-empty.
    pub fn segment_max(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "segment_max")?;
        if lens.iter().sum::<usize>() != r {
            return Err(dim_err("segment_max", &[r, c], lens));
        }
        if lens.contains(&0) {
            return Err(Error::Domain("segment_max over an empty segment".into()));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; lens.len() * c];
        let mut argmax = vec![0; lens.len() * c];
        let mut start = 0;
        for (s, &n) in lens.iter().enumerate() {
            for j in 0..c {
                let mut best = start * c + j;
                for row in start + 1..start + n {
                    if xv[row * c + j] > xv[best] {
                        best = row * c + j;
                    }
                }
                out[s * c + j] = xv[best];
                argmax[s * c + j] = best;
            }
            start += n;
        }
        let rg = self.rg(x);
        Ok(self.push(vec![lens.len(), c], out, Op::SegmentMax { x, argmax }, rg))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    /// Calling it twice without [`Graph::zero_grad`] sums both passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss does not belong to this record".into()));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                match &mut self.leaf_grads[id] {
                    Some(acc) => axpy(acc, &g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, p } => {
                if let Some(ga) = slot(nodes, grads, a) {
                    // dA = dC · Bᵀ
                    gemm(m, p, k, g, (p as isize, 1), self.value(b), (1, p as isize), ga, 1.0);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    // dB = Aᵀ · dC
                    gemm(k, m, p, self.value(a), (1, k as isize), g, (p as isize, 1), gb, 1.0);
                }
            }
            &Op::Bmm { a, b, batch, m, k, p, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = slot(nodes, grads, a) {
                    for i in 0..batch {
                        let gi = &g[i * m * p..(i + 1) * m * p];
                        let bi = &bv[i * k * p..(i + 1) * k * p];
                        // dA = dC · Bᵀ where B is K×P (or stored P×K)
                        let bs = if trans_b { (k as isize, 1) } else { (1, p as isize) };
                        gemm(m, p, k, gi, (p as isize, 1), bi, bs, &mut ga[i * m * k..(i + 1) * m * k], 1.0);
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    for i in 0..batch {
                        let gi = &g[i * m * p..(i + 1) * m * p];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * p..(i + 1) * k * p];
                        if trans_b {
                            // stored P×K: dBᵀ = dCᵀ · A
                            gemm(p, m, k, gi, (1, p as isize), ai, (k as isize, 1), out, 1.0);
                        } else {
                            gemm(k, m, p, ai, (1, k as isize), gi, (p as isize, 1), out, 1.0);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    axpy(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    axpy(gb, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    axpy(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = slot(nodes, grads, a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += v * s);
                }
            }
            &Op::AddScalar(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    axpy(ga, g);
                }
            }
            &Op::AddRowBias { x, bias, cols } => {
                if let Some(gx) = slot(nodes, grads, x) {
                    axpy(gx, g);
                }
                if let Some(gb) = slot(nodes, grads, bias) {
                    for row in g.chunks(cols.max(1)) {
                        axpy(gb, row);
                    }
                }
            }
            &Op::ScaleRows { x, s, cols } => {
                let (xv, sv) = (self.value(x), self.value(s));
                if let Some(gx) = slot(nodes, grads, x) {
                    for (r, &f) in sv.iter().enumerate() {
                        for j in r * cols..(r + 1) * cols {
                            gx[j] += g[j] * f;
                        }
                    }
                }
                if let Some(gs) = slot(nodes, grads, s) {
                    for (r, acc) in gs.iter_mut().enumerate() {
                        let range = r * cols..(r + 1) * cols;
                        *acc += g[range.clone()].iter().zip(&xv[range]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            &Op::Act(kind, z) => {
                let zv = self.value(z);
                if let Some(gz) = slot(nodes, grads, z) {
                    for i in 0..g.len() {
                        let d = match kind {
                            Activation::Sigmoid => y[i] * (1.0 - y[i]),
                            Activation::Relu => {
                                if zv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Tanh => 1.0 - y[i] * y[i],
                        };
                        gz[i] += g[i] * d;
                    }
                }
            }
            &Op::ClippedSigmoid(z) => {
                if let Some(gz) = slot(nodes, grads, z) {
                    for i in 0..g.len() {
                        if y[i] > 0.0 {
                            gz[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    }
                }
            }
            Op::Reduce { kind, x, outer, n, inner, argmax } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                if let Some(gx) = slot(nodes, grads, *x) {
                    match kind {
                        ReduceKind::Sum | ReduceKind::Mean => {
                            let f = if *kind == ReduceKind::Mean { 1.0 / n as f64 } else { 1.0 };
                            for o in 0..outer {
                                for j in 0..n {
                                    let base = (o * n + j) * inner;
                                    for i in 0..inner {
                                        gx[base + i] += g[o * inner + i] * f;
                                    }
                                }
                            }
                        }
                        ReduceKind::Max => {
                            for (k, &pos) in argmax.iter().enumerate() {
                                gx[pos] += g[k];
                            }
                        }
                    }
                }
            }
            &Op::SoftmaxLast { x, cols } => {
                if let Some(gx) = slot(nodes, grads, x) {
                    for (r, yr) in y.chunks(cols).enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SoftmaxXent { logits, probs, labels, cols } => {
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let f = g[0] / labels.len() as f64;
                    for (r, &lab) in labels.iter().enumerate() {
                        for j in 0..*cols {
                            let onehot = if j == lab { 1.0 } else { 0.0 };
                            gl[r * cols + j] += f * (probs[r * cols + j] - onehot);
                        }
                    }
                }
            }
            Op::BceLogits { logits, targets } => {
                let zv = self.value(*logits);
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let f = g[0] / targets.len() as f64;
                    for i in 0..targets.len() {
                        gl[i] += f * (sigmoid(zv[i]) - targets[i]);
                    }
                }
            }
            Op::GatherRows { x, idx, cols } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (k, &i) in idx.iter().enumerate() {
                        axpy(&mut gx[i * cols..(i + 1) * cols], &g[k * cols..(k + 1) * cols]);
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (k, &pos) in argmax.iter().enumerate() {
                        gx[pos] += g[k];
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, x) {
                    axpy(gx, g);
                }
            }
            &Op::Transpose { x, rows, cols } => {
                if let Some(gx) = slot(nodes, grads, x) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
