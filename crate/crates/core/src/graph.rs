//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation eagerly: the value is computed when the
//! node is created, and the node remembers its parents. Creation order is a
//! topological order, so `backward` walks the node list in reverse and
//! accumulates gradients in a fixed, reproducible order.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::kernels::{exp_lag_grad, exp_lag_value, periodic_lag_grad, periodic_lag_value};
use crate::matrix::{softmax_in_place, Matrix};
use crate::params::{Gradients, ParamId, ParamStore};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Softmax(NodeId),
    LayerNorm(NodeId),
    Gelu(NodeId),
    Softplus(NodeId),
    ExpKernel { alpha: NodeId, beta: NodeId },
    PeriodicKernel { alpha: NodeId, beta: NodeId },
    Element { src: NodeId, row: usize, col: usize },
    Row { src: NodeId, row: usize },
    MeanRows(NodeId),
    MaxRows(NodeId),
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    BceWithLogits { logit: NodeId, target: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    grad: Option<Matrix>,
}

/// Operation record for one forward pass.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: Vec<Option<NodeId>>,
}

impl Graph {
    /// A graph able to reference the parameters of `store`.
    pub fn new(store: &ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: vec![None; store.len()],
        }
    }

    /// A graph over constants only.
    pub fn detached() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: Vec::new(),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `id`, if reached.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so that
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(node) = self.param_leaves[id.index()] {
            return node;
        }
        let node = self.push(store.value(id).clone(), Op::Param);
        self.param_leaves[id.index()] = Some(node);
        node
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    fn row_broadcast(&self, op: &'static str, a: NodeId, row: NodeId) -> Result<()> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::Shape {
                op,
                lhs: sa,
                rhs: sr,
            });
        }
        Ok(())
    }

    fn scalar_input(&self, op: &'static str, id: NodeId) -> Result<f64> {
        let s = self.shape(id);
        if s != (1, 1) {
            return Err(Error::Shape {
                op,
                lhs: s,
                rhs: (1, 1),
            });
        }
        Ok(self.value(id)[(0, 0)])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_bt(self.value(b))?;
        Ok(self.push(v, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = Matrix::from_vec(
            self.value(a).rows(),
            self.value(a).cols(),
            self.value(a)
                .as_slice()
                .iter()
                .zip(self.value(b).as_slice())
                .map(|(x, y)| x - y)
                .collect(),
        )?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_broadcast("add_row", a, row)?;
        let r = self.value(row).as_slice().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` element-wise by a `1×n` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_broadcast("mul_row", a, row)?;
        let r = self.value(row).as_slice().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// `a + c` for a constant scalar `c`.
    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        self.push(v, Op::Softmax(a))
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let (mean, inv_std) = row_moments(row);
            for x in row.iter_mut() {
                *x = (*x - mean) * inv_std;
            }
        }
        self.push(v, Op::LayerNorm(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| {
            let t = libm::tanh(GELU_C * (x + GELU_A * x * x * x));
            0.5 * x * (1.0 + t)
        });
        self.push(v, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    /// `T×T` exponential kernel matrix from scalar `alpha`, `beta` nodes.
    pub fn exp_kernel(&mut self, t: usize, alpha: NodeId, beta: NodeId) -> Result<NodeId> {
        let a = self.scalar_input("exp_kernel", alpha)?;
        let b = self.scalar_input("exp_kernel", beta)?;
        let lags: Vec<f64> = (0..t).map(|h| exp_lag_value(h as f64, a, b)).collect();
        Ok(self.push(toeplitz(&lags), Op::ExpKernel { alpha, beta }))
    }

    /// `T×T` periodic kernel matrix from scalar `alpha`, `beta` nodes.
    pub fn periodic_kernel(&mut self, t: usize, alpha: NodeId, beta: NodeId) -> Result<NodeId> {
        let a = self.scalar_input("periodic_kernel", alpha)?;
        let b = self.scalar_input("periodic_kernel", beta)?;
        let lags: Vec<f64> = (0..t).map(|h| periodic_lag_value(h as f64, a, b)).collect();
        Ok(self.push(toeplitz(&lags), Op::PeriodicKernel { alpha, beta }))
    }

    /// Single cell as a `1×1` node.
    pub fn element(&mut self, src: NodeId, row: usize, col: usize) -> Result<NodeId> {
        let (r, c) = self.shape(src);
        if row >= r || col >= c {
            return Err(contract(alloc::format!(
                "element ({row}, {col}) outside {r}×{c}"
            )));
        }
        let v = Matrix::scalar(self.value(src)[(row, col)]);
        Ok(self.push(v, Op::Element { src, row, col }))
    }

    pub fn row(&mut self, src: NodeId, row: usize) -> Result<NodeId> {
        let (r, c) = self.shape(src);
        if row >= r {
            return Err(contract(alloc::format!("row {row} outside {r}×{c}")));
        }
        let v = Matrix::from_vec(1, c, self.value(src).row(row).to_vec())?;
        Ok(self.push(v, Op::Row { src, row }))
    }

    /// Column means as a `1×n` row.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let mut out = Matrix::zeros(1, m.cols());
        for i in 0..m.rows() {
            for (o, x) in out.as_mut_slice().iter_mut().zip(m.row(i)) {
                *o += x;
            }
        }
        let n = m.rows() as f64;
        let out = out.map(|x| x / n);
        self.push(out, Op::MeanRows(a))
    }

    /// Column maxima as a `1×n` row; ties resolve to the first row.
    pub fn max_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let mut out = Matrix::filled(1, m.cols(), f64::NEG_INFINITY);
        for i in 0..m.rows() {
            for (o, &x) in out.as_mut_slice().iter_mut().zip(m.row(i)) {
                if x > *o {
                    *o = x;
                }
            }
        }
        self.push(out, Op::MaxRows(a))
    }

    /// Horizontal concatenation of blocks with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| contract("concat_cols needs at least one block"))?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: self.shape(p),
                });
            }
            cols += self.shape(p).1;
        }
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                out.row_mut(i)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// Binary cross-entropy of a `1×1` logit against a 0/1 target, computed
    /// in the overflow-free form `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logit: NodeId, target: f64) -> Result<NodeId> {
        let z = self.scalar_input("bce_with_logits", logit)?;
        let loss = z.max(0.0) - z * target + libm::log1p(libm::exp(-libm::fabs(z)));
        Ok(self.push(Matrix::scalar(loss), Op::BceWithLogits { logit, target }))
    }

    /// Reverse pass from a `1×1` loss. Every parameter leaf reached receives a
    /// gradient; parameters absent from the graph get zeros.
    pub fn backward(&mut self, loss: NodeId, store: &ParamStore) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(contract(alloc::format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &g)?;
            self.nodes[idx].grad = Some(g);
        }
        let grads = self
            .param_leaves
            .iter()
            .enumerate()
            .map(|(i, leaf)| match leaf.and_then(|n| self.nodes[n.0].grad.clone()) {
                Some(g) => g,
                None => {
                    let (r, c) = store.value(ParamId(i)).shape();
                    Matrix::zeros(r, c)
                }
            })
            .collect();
        Ok(Gradients::from_vec(grads))
    }

    fn accumulate(&mut self, id: NodeId, delta: Matrix) {
        let slot = &mut self.nodes[id.0].grad;
        match slot {
            Some(g) => g.add_assign(&delta),
            None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Matrix) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_bt(self.value(b))?;
                let db = self.value(a).matmul_at(g)?;
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::MatMulBt(a, b) => {
                let da = g.matmul(self.value(b))?;
                let db = g.matmul_at(self.value(a))?;
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let da = g.hadamard(self.value(b))?;
                let db = g.hadamard(self.value(a))?;
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::AddRow(a, row) => {
                let mut dr = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (d, x) in dr.as_mut_slice().iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                self.accumulate(a, g.clone());
                self.accumulate(row, dr);
            }
            Op::MulRow(a, row) => {
                let av = self.value(a);
                let rv = self.value(row);
                let mut da = g.clone();
                let mut dr = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        da[(i, j)] = g[(i, j)] * rv[(0, j)];
                        dr[(0, j)] += g[(i, j)] * av[(i, j)];
                    }
                }
                self.accumulate(a, da);
                self.accumulate(row, dr);
            }
            Op::Scale(a, s) => self.accumulate(a, g.scale(s)),
            Op::Offset(a) => self.accumulate(a, g.clone()),
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(a, dx);
            }
            Op::LayerNorm(a) => {
                let x = self.value(a);
                let y = &self.nodes[idx].value;
                let n = x.cols() as f64;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let (_, inv_std) = row_moments(x.row(i));
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let mean_g: f64 = gr.iter().sum::<f64>() / n;
                    let mean_gy: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = inv_std * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                self.accumulate(a, dx);
            }
            Op::Gelu(a) => {
                let x = self.value(a);
                let mut dx = g.clone();
                for (d, &xv) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    let u = GELU_C * (xv + GELU_A * xv * xv * xv);
                    let t = libm::tanh(u);
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
                    *d *= 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                }
                self.accumulate(a, dx);
            }
            Op::Softplus(a) => {
                let x = self.value(a);
                let mut dx = g.clone();
                for (d, &xv) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    *d *= sigmoid(xv);
                }
                self.accumulate(a, dx);
            }
            Op::ExpKernel { alpha, beta } | Op::PeriodicKernel { alpha, beta } => {
                let is_exp = matches!(op, Op::ExpKernel { .. });
                let a = self.value(alpha)[(0, 0)];
                let b = self.value(beta)[(0, 0)];
                let lag_grads = per_lag_sums(g);
                let (mut da, mut db) = (0.0, 0.0);
                for (h, gh) in lag_grads.iter().enumerate().skip(1) {
                    let (ka, kb) = if is_exp {
                        exp_lag_grad(h as f64, a, b)
                    } else {
                        periodic_lag_grad(h as f64, a, b)
                    };
                    da += gh * ka;
                    db += gh * kb;
                }
                self.accumulate(alpha, Matrix::scalar(da));
                self.accumulate(beta, Matrix::scalar(db));
            }
            Op::Element { src, row, col } => {
                let (r, c) = self.shape(src);
                let mut d = Matrix::zeros(r, c);
                d[(row, col)] = g[(0, 0)];
                self.accumulate(src, d);
            }
            Op::Row { src, row } => {
                let (r, c) = self.shape(src);
                let mut d = Matrix::zeros(r, c);
                d.row_mut(row).copy_from_slice(g.row(0));
                self.accumulate(src, d);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(a);
                let inv = 1.0 / r as f64;
                let d = Matrix::from_fn(r, c, |_, j| g[(0, j)] * inv);
                self.accumulate(a, d);
            }
            Op::MaxRows(a) => {
                let x = self.value(a);
                let (r, c) = x.shape();
                let mut d = Matrix::zeros(r, c);
                for j in 0..c {
                    let mut best = 0;
                    for i in 1..r {
                        if x[(i, j)] > x[(best, j)] {
                            best = i;
                        }
                    }
                    d[(best, j)] = g[(0, j)];
                }
                self.accumulate(a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(p);
                    let d = Matrix::from_fn(r, c, |i, j| g[(i, offset + j)]);
                    offset += c;
                    self.accumulate(p, d);
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(a, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::BceWithLogits { logit, target } => {
                let z = self.value(logit)[(0, 0)];
                self.accumulate(logit, Matrix::scalar(g[(0, 0)] * (sigmoid(z) - target)));
            }
        }
        Ok(())
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / libm::sqrt(var + LAYER_NORM_EPS))
}

/// Symmetric Toeplitz matrix with entry `(i, j) = lags[|i − j|]`.
pub(crate) fn toeplitz(lags: &[f64]) -> Matrix {
    let t = lags.len();
    let mut m = Matrix::zeros(t, t);
    for i in 0..t {
        let row = m.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = lags[i.abs_diff(j)];
        }
    }
    m
}

/// Sums of `g` over each lag band `|i − j| = h`.
fn per_lag_sums(g: &Matrix) -> Vec<f64> {
    let t = g.rows();
    let mut sums = vec![0.0; t];
    for i in 0..t {
        for (j, v) in g.row(i).iter().enumerate() {
            sums[i.abs_diff(j)] += v;
        }
    }
    sums
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + libm::log1p(-libm::exp(-y))
    } else {
        libm::log(libm::expm1(y))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}
