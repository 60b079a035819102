//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a Wengert tape: every operation appends its output node and
//! an [`Op`] record, and [`Graph::backward`] replays the records in exact
//! reverse order. All reductions run left to right, so forward values and
//! gradients are bitwise reproducible for identical inputs.

mod array;
mod check;

pub use array::{dot, Array2};
pub use check::{finite_difference_grad, max_relative_error, GRADCHECK_FLOOR};

use thiserror::Error;

/// Guard used by every row normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("buffer of length {len} cannot hold a {rows}x{cols} matrix")]
    BufferLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("ragged rows: expected {expected} columns, found {found}")]
    RaggedRows { expected: usize, found: usize },
    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("backward already ran on this graph; call zero_grad first")]
    BackwardTwice,
    #[error("{op}: value {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("masked_softmax: row {row} has every entry masked")]
    AllMasked { row: usize },
    #[error("masked_softmax: mask entry {value} at ({row}, {col}) is not 0 or 1")]
    InvalidMask { row: usize, col: usize, value: f64 },
    #[error("{op}: row index {index} out of range for {rows} rows")]
    RowIndex {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Self::Shape { op, left, right }
    }
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2,
    grad: Array2,
    requires_grad: bool,
}

/// Recorded operation. Inputs are node ids; the output is the node created
/// alongside the record.
#[derive(Debug, Clone)]
enum Op {
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    RowNormalize(NodeId, f64),
    MaskedSoftmax(NodeId, Array2),
    LogSoftmaxRows(NodeId),
    LayerNormRows(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Log1pExp(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Neg(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MulScalar(NodeId, NodeId),
    AddScalar(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Sum(NodeId),
    SelectRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
}

/// Elementwise kinds accepted by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Exp,
    Log,
    Log1pExp,
    Negate,
    Tanh,
    Relu,
    Scale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    tape: Vec<(Op, NodeId)>,
    params: Vec<NodeId>,
    backward_done: bool,
}

/// Numerically stable `log(1 + e^x)`.
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2, requires_grad: bool) -> NodeId {
        let grad = Array2::zeros(value.rows(), value.cols());
        self.nodes.push(Node {
            value,
            grad,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, inputs: &[NodeId], value: Array2) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let out = self.push(value, requires_grad);
        if requires_grad {
            self.tape.push((op, out));
        }
        out
    }

    /// Learnable leaf. Receives a gradient on backward.
    pub fn param(&mut self, value: Array2) -> NodeId {
        let id = self.push(value, true);
        self.params.push(id);
        id
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2) -> NodeId {
        self.push(value, false)
    }

    /// Copy of `id` cut off from the tape (stop-gradient).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let value = self.nodes[id.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, id: NodeId) -> &Array2 {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Array2 {
        &self.nodes[id.0].grad
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> Option<f64> {
        self.value(id).item()
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.record(Op::MatMul(a, b), &[a, b], value))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.record(Op::Transpose(a), &[a], value)
    }

    /// `a × bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bt = self.transpose(b);
        self.matmul(a, bt)
    }

    /// Divides each row by `max(eps, ‖row‖)`.
    pub fn row_normalize(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        if self.shape(a).1 == 0 {
            return Err(AutodiffError::Empty("row_normalize"));
        }
        let value = self.value(a).row_normalized(eps);
        Ok(self.record(Op::RowNormalize(a, eps), &[a], value))
    }

    /// Row-wise softmax restricted to entries where `mask == 1`. Masked
    /// entries are excluded from the normalizer and come out as exactly 0.
    pub fn masked_softmax(&mut self, scores: NodeId, mask: &Array2) -> Result<NodeId> {
        let s = self.value(scores);
        if s.shape() != mask.shape() {
            return Err(AutodiffError::shape(
                "masked_softmax",
                s.shape(),
                mask.shape(),
            ));
        }
        for i in 0..mask.rows() {
            for j in 0..mask.cols() {
                let m = mask.get(i, j);
                if m != 0.0 && m != 1.0 {
                    return Err(AutodiffError::InvalidMask {
                        row: i,
                        col: j,
                        value: m,
                    });
                }
            }
        }
        let mut out = Array2::zeros(s.rows(), s.cols());
        for i in 0..s.rows() {
            let row = s.row(i);
            let keep = mask.row(i);
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &m)| m == 1.0)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(AutodiffError::AllMasked { row: i });
            }
            let o = out.row_mut(i);
            let mut total = 0.0;
            for j in 0..row.len() {
                if keep[j] == 1.0 {
                    let e = (row[j] - max).exp();
                    o[j] = e;
                    total += e;
                }
            }
            o.iter_mut().for_each(|x| *x /= total);
        }
        Ok(self.record(Op::MaskedSoftmax(scores, mask.clone()), &[scores], out))
    }

    /// `x - logsumexp(x)` per row.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.cols() == 0 {
            return Err(AutodiffError::Empty("log_softmax_rows"));
        }
        let mut out = v.clone();
        for i in 0..v.rows() {
            let r = out.row_mut(i);
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().fold(0.0, |acc, &x| acc + (x - max).exp()).ln();
            r.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self.record(Op::LogSoftmaxRows(a), &[a], out))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let v = self.value(a);
        if v.cols() == 0 {
            return Err(AutodiffError::Empty("layer_norm_rows"));
        }
        let mut out = v.clone();
        for i in 0..v.rows() {
            let r = out.row_mut(i);
            let (mean, inv_std) = row_moments(r, eps);
            r.iter_mut().for_each(|x| *x = (*x - mean) * inv_std);
        }
        Ok(self.record(Op::LayerNormRows(a, eps), &[a], out))
    }

    pub fn elementwise(&mut self, a: NodeId, kind: Elementwise) -> Result<NodeId> {
        match kind {
            Elementwise::Exp => Ok(self.exp(a)),
            Elementwise::Log => self.log(a),
            Elementwise::Log1pExp => Ok(self.log1p_exp(a)),
            Elementwise::Negate => Ok(self.neg(a)),
            Elementwise::Tanh => Ok(self.tanh(a)),
            Elementwise::Relu => Ok(self.relu(a)),
            Elementwise::Scale(c) => Ok(self.scale(a, c)),
        }
    }

    pub fn binary(&mut self, a: NodeId, b: NodeId, kind: Binary) -> Result<NodeId> {
        match kind {
            Binary::Add => self.add(a, b),
            Binary::Sub => self.sub(a, b),
            Binary::Mul => self.mul(a, b),
        }
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        self.record(Op::Exp(a), &[a], value)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(AutodiffError::Domain {
                op: "log",
                value: bad,
            });
        }
        let value = self.value(a).map(f64::ln);
        Ok(self.record(Op::Log(a), &[a], value))
    }

    pub fn log1p_exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(log1p_exp);
        self.record(Op::Log1pExp(a), &[a], value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.record(Op::Tanh(a), &[a], value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(0.0));
        self.record(Op::Relu(a), &[a], value)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| -x);
        self.record(Op::Neg(a), &[a], value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| c * x);
        self.record(Op::Scale(a, c), &[a], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.record(Op::Add(a, b), &[a, b], value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.record(Op::Sub(a, b), &[a, b], value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record(Op::Mul(a, b), &[a, b], value))
    }

    /// `s · a` for a 1x1 node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let c = self.expect_scalar("mul_scalar", a, s)?;
        let value = self.value(a).map(|x| c * x);
        Ok(self.record(Op::MulScalar(a, s), &[a, s], value))
    }

    /// `a + s` for a 1x1 node `s`.
    pub fn add_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let c = self.expect_scalar("add_scalar", a, s)?;
        let value = self.value(a).map(|x| x + c);
        Ok(self.record(Op::AddScalar(a, s), &[a, s], value))
    }

    /// Adds a `1 × cols` bias to every row.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        if self.shape(bias) != (1, cols) {
            return Err(AutodiffError::shape(
                "add_row_bias",
                (rows, cols),
                self.shape(bias),
            ));
        }
        let b = self.value(bias).row(0).to_vec();
        let mut value = self.value(a).clone();
        for i in 0..rows {
            value
                .row_mut(i)
                .iter_mut()
                .zip(&b)
                .for_each(|(x, y)| *x += y);
        }
        Ok(self.record(Op::AddRowBias(a, bias), &[a, bias], value))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Array2::scalar(self.value(a).sum());
        self.record(Op::Sum(a), &[a], value)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(AutodiffError::Empty("mean"));
        }
        let s = self.sum(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn select_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let rows = self.shape(a).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::RowIndex {
                op: "select_rows",
                index: bad,
                rows,
            });
        }
        let value = self.value(a).select_rows(idx);
        Ok(self.record(Op::SelectRows(a, idx.to_vec()), &[a], value))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(AutodiffError::Empty("concat_rows"));
        }
        let values: Vec<&Array2> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Array2::vstack(&values)?;
        Ok(self.record(Op::ConcatRows(parts.to_vec()), parts, value))
    }

    fn expect_scalar(&self, op: &'static str, a: NodeId, s: NodeId) -> Result<f64> {
        self.value(s)
            .item()
            .ok_or_else(|| AutodiffError::shape(op, self.shape(a), self.shape(s)))
    }

    // ---- backward ---------------------------------------------------------

    /// Populates the gradient of every node that depends on a parameter.
    /// Operations are visited in exact reverse recording order.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NonScalarLoss { rows, cols });
        }
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Array2::scalar(1.0);
        let tape = std::mem::take(&mut self.tape);
        for (op, out) in tape.iter().rev() {
            if out.0 > loss.0 {
                continue;
            }
            let g = self.nodes[out.0].grad.clone();
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            self.backprop_op(op, *out, &g);
        }
        self.tape = tape;
        Ok(())
    }

    /// Clears every gradient so that backward may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        self.backward_done = false;
    }

    fn accumulate(&mut self, id: NodeId, contrib: &Array2) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(node.grad.shape(), contrib.shape());
        node.grad
            .data_mut()
            .iter_mut()
            .zip(contrib.data())
            .for_each(|(g, c)| *g += c);
    }

    fn backprop_op(&mut self, op: &Op, out: NodeId, g: &Array2) {
        match op {
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                // dA = g·Bᵀ, dB = Aᵀ·g
                let da = g.matmul_t(bv).expect("matmul backward shape");
                let db = av.transpose().matmul(g).expect("matmul backward shape");
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Transpose(a) => {
                let da = g.transpose();
                self.accumulate(*a, &da);
            }
            Op::RowNormalize(a, eps) => {
                let x = self.value(*a);
                let y = self.value(out);
                let mut da = Array2::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let xr = x.row(i);
                    let norm = dot(xr, xr).sqrt();
                    let gr = g.row(i);
                    let dr = da.row_mut(i);
                    if norm > *eps {
                        let yr = y.row(i);
                        let yg = dot(yr, gr);
                        for j in 0..dr.len() {
                            dr[j] = (gr[j] - yr[j] * yg) / norm;
                        }
                    } else {
                        for j in 0..dr.len() {
                            dr[j] = gr[j] / eps;
                        }
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::MaskedSoftmax(a, _mask) => {
                // Masked outputs are exactly zero, so their gradient vanishes.
                let y = self.value(out);
                let mut da = Array2::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let yg = dot(yr, gr);
                    let dr = da.row_mut(i);
                    for j in 0..dr.len() {
                        dr[j] = yr[j] * (gr[j] - yg);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::LogSoftmaxRows(a) => {
                let y = self.value(out);
                let mut da = Array2::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let gsum = gr.iter().fold(0.0, |acc, &x| acc + x);
                    let dr = da.row_mut(i);
                    for j in 0..dr.len() {
                        dr[j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::LayerNormRows(a, eps) => {
                let x = self.value(*a);
                let y = self.value(out);
                let n = x.cols() as f64;
                let mut da = Array2::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let (_, inv_std) = row_moments(x.row(i), *eps);
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let gmean = gr.iter().fold(0.0, |acc, &v| acc + v) / n;
                    let gymean = dot(gr, yr) / n;
                    let dr = da.row_mut(i);
                    for j in 0..dr.len() {
                        dr[j] = inv_std * (gr[j] - gmean - yr[j] * gymean);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::Exp(a) => {
                let da = g.zip_map(self.value(out), |g, y| g * y).unwrap();
                self.accumulate(*a, &da);
            }
            Op::Log(a) => {
                let da = g.zip_map(self.value(*a), |g, x| g / x).unwrap();
                self.accumulate(*a, &da);
            }
            Op::Log1pExp(a) => {
                let da = g.zip_map(self.value(*a), |g, x| g * sigmoid(x)).unwrap();
                self.accumulate(*a, &da);
            }
            Op::Tanh(a) => {
                let da = g
                    .zip_map(self.value(out), |g, y| g * (1.0 - y * y))
                    .unwrap();
                self.accumulate(*a, &da);
            }
            Op::Relu(a) => {
                let da = g
                    .zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })
                    .unwrap();
                self.accumulate(*a, &da);
            }
            Op::Neg(a) => {
                let da = g.map(|x| -x);
                self.accumulate(*a, &da);
            }
            Op::Scale(a, c) => {
                let da = g.map(|x| c * x);
                self.accumulate(*a, &da);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let db = g.map(|x| -x);
                self.accumulate(*b, &db);
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(*b), |g, y| g * y).unwrap();
                let db = g.zip_map(self.value(*a), |g, x| g * x).unwrap();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::MulScalar(a, s) => {
                let c = self.value(*s).data()[0];
                let da = g.map(|x| c * x);
                let ds = Array2::scalar(dot(g.data(), self.value(*a).data()));
                self.accumulate(*a, &da);
                self.accumulate(*s, &ds);
            }
            Op::AddScalar(a, s) => {
                let ds = Array2::scalar(g.sum());
                self.accumulate(*a, g);
                self.accumulate(*s, &ds);
            }
            Op::AddRowBias(a, bias) => {
                let mut db = Array2::zeros(1, g.cols());
                for r in g.iter_rows() {
                    db.row_mut(0).iter_mut().zip(r).for_each(|(d, x)| *d += x);
                }
                self.accumulate(*a, g);
                self.accumulate(*bias, &db);
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                let da = Array2::filled(rows, cols, g.data()[0]);
                self.accumulate(*a, &da);
            }
            Op::SelectRows(a, idx) => {
                let (rows, cols) = self.shape(*a);
                let mut da = Array2::zeros(rows, cols);
                for (k, &i) in idx.iter().enumerate() {
                    da.row_mut(i)
                        .iter_mut()
                        .zip(g.row(k))
                        .for_each(|(d, x)| *d += x);
                }
                self.accumulate(*a, &da);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    let idx: Vec<usize> = (start..start + rows).collect();
                    let dp = g.select_rows(&idx);
                    self.accumulate(p, &dp);
                    start += rows;
                }
            }
        }
    }
}

fn row_moments(r: &[f64], eps: f64) -> (f64, f64) {
    let n = r.len() as f64;
    let mean = r.iter().fold(0.0, |acc, &x| acc + x) / n;
    let var = r.iter().fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Array2 {
        Array2::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i = g.constant(Array2::identity(2));
        let mm = m(&[&[1.5, -2.0], &[0.25, 4.0]]);
        let b = g.constant(mm.clone());
        let out = g.matmul(i, b).unwrap();
        assert_eq!(g.value(out), &mm);

        let a = g.constant(m(&[&[1.0, 2.0]]));
        let c = g.constant(m(&[&[3.0], &[4.0]]));
        let out = g.matmul(a, c).unwrap();
        assert_eq!(g.scalar(out), Some(11.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Array2::zeros(2, 3));
        let b = g.constant(Array2::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::Shape {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn row_normalize_cases() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[3.0, 4.0], &[0.0, 0.0]]));
        let n = g.row_normalize(a, NORM_EPS).unwrap();
        assert_eq!(g.value(n).row(0), &[0.6, 0.8]);
        assert_eq!(g.value(n).row(1), &[0.0, 0.0]);
    }

    #[test]
    fn masked_softmax_cases() {
        let mut g = Graph::new();
        let s = g.constant(m(&[&[5.0, 9.0]]));
        let out = g.masked_softmax(s, &m(&[&[0.0, 1.0]])).unwrap();
        assert_eq!(g.value(out).row(0), &[0.0, 1.0]);

        let s = g.constant(Array2::zeros(1, 3));
        let out = g.masked_softmax(s, &Array2::ones(1, 3)).unwrap();
        for &w in g.value(out).row(0) {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }

        let s = g.constant(Array2::zeros(2, 2));
        let err = g
            .masked_softmax(s, &m(&[&[1.0, 0.0], &[0.0, 0.0]]))
            .unwrap_err();
        assert_eq!(err, AutodiffError::AllMasked { row: 1 });

        let err = g
            .masked_softmax(s, &m(&[&[1.0, 0.5], &[1.0, 1.0]]))
            .unwrap_err();
        assert!(matches!(err, AutodiffError::InvalidMask { .. }));
    }

    #[test]
    fn masked_entries_get_zero_gradient() {
        let mut g = Graph::new();
        let s = g.param(m(&[&[0.3, -1.0, 2.0], &[1.0, 0.0, -0.5]]));
        let mask = m(&[&[0.0, 1.0, 1.0], &[1.0, 1.0, 0.0]]);
        let y = g.masked_softmax(s, &mask).unwrap();
        let w = g.constant(m(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 4.0]]));
        let wy = g.mul(y, w).unwrap();
        let loss = g.sum(wy);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(s).get(0, 0), 0.0);
        assert_eq!(g.grad(s).get(1, 2), 0.0);
        assert!(g.grad(s).get(0, 1) != 0.0);
    }

    #[test]
    fn log1p_exp_stability() {
        assert!((log1p_exp(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let small = log1p_exp(-50.0);
        assert!((small - 1.9287498479639178e-22).abs() < 1e-30);
        let big = log1p_exp(50.0);
        assert!((big - 50.0).abs() < 1e-15);
        assert!(log1p_exp(1000.0).is_finite());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 0.0]]));
        assert!(matches!(
            g.log(a),
            Err(AutodiffError::Domain { op: "log", .. })
        ));
    }

    #[test]
    fn backward_sum_of_param_is_ones() {
        let mut g = Graph::new();
        let p = g.param(Array2::from_fn(2, 3, |i, j| (i + j) as f64));
        assert_eq!(g.grad(p), &Array2::zeros(2, 3));
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p), &Array2::ones(2, 3));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let p = g.param(Array2::ones(1, 2));
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(AutodiffError::BackwardTwice));
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p), &Array2::ones(1, 2));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let p = g.param(Array2::ones(1, 2));
        assert_eq!(
            g.backward(p),
            Err(AutodiffError::NonScalarLoss { rows: 1, cols: 2 })
        );
    }

    #[test]
    fn detached_nodes_receive_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(Array2::from_fn(2, 2, |i, j| 1.0 + (i * 2 + j) as f64));
        let d = g.detach(p);
        let prod = g.mul(p, d).unwrap();
        let s = g.sum(prod);
        g.backward(s).unwrap();
        // only the live branch contributes: d/dp (p * const) = const
        assert_eq!(g.grad(p), g.value(d));
        assert_eq!(g.grad(d), &Array2::zeros(2, 2));
    }
}
