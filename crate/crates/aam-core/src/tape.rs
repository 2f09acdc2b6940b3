//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`] in topological order during the
//! forward pass; [`Tape::backward`] replays them in reverse and accumulates
//! adjoints into per-node gradient buffers. Gradients persist across
//! backward calls until [`Tape::zero_grad`] is called.
//!
//! A tape is single-threaded; distinct tapes share no state.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Neg(Id),
    Exp(Id),
    Log(Id),
    Sigmoid(Id),
    /// Numerically stable log σ(x).
    LogSigmoid(Id),
    SoftmaxRow(Id),
    LogSoftmaxRow(Id),
    Matmul(Id, Id),
    Transpose(Id),
    /// Row gather: (table[V,d], indices[T]) -> [T,d].
    Embed(Id, Vec<usize>),
    /// Per-row element pick: (m[T,V], indices[T]) -> [T].
    PickPerRow(Id, Vec<usize>),
    Sum(Id),
    Mean(Id),
    Scale(Id, f64),
    Relu(Id),
    /// Row-wise normalization to zero mean / unit variance; cached
    /// reciprocal std per row.
    LayerNorm(Id, Vec<f64>),
    Concat(usize, Vec<Id>),
    Slice(Id, usize, usize, usize),
    Clamp(Id, f64, f64),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires: bool,
    op: Op,
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires: bool, op: Op) -> Id {
        self.nodes.push(Node { value, grad: None, requires, op });
        Id(self.nodes.len() - 1)
    }

    fn requires(&self, id: Id) -> bool {
        self.nodes[id.0].requires
    }

    /// Register a leaf. Gradients flow to it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Id {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Id {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Id {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: Id) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of the most recent backward passes, if any.
    pub fn grad(&self, id: Id) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn broadcast_check(&self, op: &'static str, a: Id, b: Id) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ok = ta.shape() == tb.shape()
            || tb.is_scalar()
            || (tb.rows_cols().0 == 1 && tb.rows_cols().1 == ta.rows_cols().1);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                detail: format!("{} vs {}", ta.shape_string(), tb.shape_string()),
            })
        }
    }

    /// Elementwise a ⊕ b; b may be a scalar or a row vector broadcast
    /// across a's rows.
    fn zip(&mut self, op_name: &'static str, a: Id, b: Id, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Id> {
        self.broadcast_check(op_name, a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let bn = tb.numel();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % bn]))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(value, requires, op))
    }

    pub fn add(&mut self, a: Id, b: Id) -> Result<Id> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Result<Id> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Result<Id> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Id, f: impl Fn(f64) -> f64, op: Op) -> Id {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let requires = self.requires(x);
        self.push(value, requires, op)
    }

    pub fn neg(&mut self, x: Id) -> Id {
        self.map(x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: Id) -> Result<Id> {
        let id = self.map(x, libm::exp, Op::Exp(x));
        if !self.value(id).all_finite() {
            return Err(Error::Numeric(format!("exp overflow")));
        }
        Ok(id)
    }

    pub fn log(&mut self, x: Id) -> Result<Id> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric(format!("log of non-positive value")));
        }
        Ok(self.map(x, libm::log, Op::Log(x)))
    }

    pub fn sigmoid(&mut self, x: Id) -> Id {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: Id) -> Id {
        self.map(x, log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn relu(&mut self, x: Id) -> Id {
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn scale(&mut self, x: Id, c: f64) -> Id {
        self.map(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn clamp(&mut self, x: Id, lo: f64, hi: f64) -> Id {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    // ── rows ─────────────────────────────────────────────────────────

    pub fn softmax_row(&mut self, x: Id) -> Id {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        let mut data = t.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let requires = self.requires(x);
        self.push(value, requires, Op::SoftmaxRow(x))
    }

    pub fn log_softmax_row(&mut self, x: Id) -> Id {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        let mut data = t.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            log_softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let requires = self.requires(x);
        self.push(value, requires, Op::LogSoftmaxRow(x))
    }

    /// Row-wise zero-mean unit-variance normalization (eps 1e-5).
    pub fn layer_norm(&mut self, x: Id) -> Id {
        const EPS: f64 = 1e-5;
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        let mut data = t.data().to_vec();
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / libm::sqrt(var + EPS);
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let requires = self.requires(x);
        self.push(value, requires, Op::LayerNorm(x, rstds))
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Id, b: Id) -> Result<Id> {
        let (m, k) = self.value(a).rows_cols();
        let (k2, n) = self.value(b).rows_cols();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!(
                    "{} x {}",
                    self.value(a).shape_string(),
                    self.value(b).shape_string()
                ),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(value, requires, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: Id) -> Id {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = t.data()[r * cols + c];
            }
        }
        let value = Tensor::new(vec![cols, rows], data).expect("transposed shape");
        let requires = self.requires(x);
        self.push(value, requires, Op::Transpose(x))
    }

    // ── gather / reshaping ───────────────────────────────────────────

    /// Row lookup: table[V,d] gathered at `indices` -> [T,d].
    pub fn embed(&mut self, table: Id, indices: &[usize]) -> Result<Id> {
        let t = self.value(table);
        let (v, d) = t.rows_cols();
        for &i in indices {
            if i >= v {
                return Err(Error::Shape {
                    op: "embed",
                    detail: format!("index {i} out of range for {v} rows"),
                });
            }
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        let requires = self.requires(table);
        Ok(self.push(value, requires, Op::Embed(table, indices.to_vec())))
    }

    /// One element per row: m[T,V] at column indices[t] -> [T].
    pub fn pick_per_row(&mut self, m: Id, indices: &[usize]) -> Result<Id> {
        let t = self.value(m);
        let (rows, cols) = t.rows_cols();
        if indices.len() != rows {
            return Err(Error::Shape {
                op: "pick_per_row",
                detail: format!("{} indices for {rows} rows", indices.len()),
            });
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &c) in indices.iter().enumerate() {
            if c >= cols {
                return Err(Error::Shape {
                    op: "pick_per_row",
                    detail: format!("column {c} out of range for {cols} columns"),
                });
            }
            data.push(t.data()[r * cols + c]);
        }
        let value = Tensor::new(vec![rows], data)?;
        let requires = self.requires(m);
        Ok(self.push(value, requires, Op::PickPerRow(m, indices.to_vec())))
    }

    pub fn sum(&mut self, x: Id) -> Id {
        let s = self.value(x).data().iter().sum();
        let requires = self.requires(x);
        self.push(Tensor::scalar(s), requires, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Id) -> Id {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let requires = self.requires(x);
        self.push(Tensor::scalar(m), requires, Op::Mean(x))
    }

    /// Concatenate along `axis` (0 = rows, 1 = columns). Rank-1 inputs
    /// concatenate along axis 0.
    pub fn concat(&mut self, axis: usize, parts: &[Id]) -> Result<Id> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let requires = parts.iter().any(|&p| self.requires(p));
        let value = if axis == 0 && self.value(parts[0]).shape().len() == 1 {
            let mut data = Vec::new();
            for &p in parts {
                let t = self.value(p);
                if t.shape().len() != 1 {
                    return Err(Error::Shape { op: "concat", detail: format!("mixed ranks") });
                }
                data.extend_from_slice(t.data());
            }
            let n = data.len();
            Tensor::new(vec![n], data)?
        } else if axis == 1 {
            let rows = self.value(parts[0]).rows_cols().0;
            let total_cols: usize = parts.iter().map(|&p| self.value(p).rows_cols().1).sum();
            for &p in parts {
                if self.value(p).rows_cols().0 != rows {
                    return Err(Error::Shape {
                        op: "concat",
                        detail: format!("row mismatch: {}", self.value(p).shape_string()),
                    });
                }
            }
            let mut data = vec![0.0; rows * total_cols];
            let mut col_off = 0;
            for &p in parts {
                let t = self.value(p);
                let (_, c) = t.rows_cols();
                for r in 0..rows {
                    data[r * total_cols + col_off..r * total_cols + col_off + c]
                        .copy_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
                col_off += c;
            }
            Tensor::new(vec![rows, total_cols], data)?
        } else {
            let cols = self.value(parts[0]).rows_cols().1;
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                let t = self.value(p);
                if t.rows_cols().1 != cols {
                    return Err(Error::Shape {
                        op: "concat",
                        detail: format!("column mismatch: {}", t.shape_string()),
                    });
                }
                rows += t.rows_cols().0;
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, cols], data)?
        };
        Ok(self.push(value, requires, Op::Concat(axis, parts.to_vec())))
    }

    /// Half-open [start, end) along `axis`.
    pub fn slice(&mut self, x: Id, axis: usize, start: usize, end: usize) -> Result<Id> {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        // A rank-1 tensor is sliced along its only dimension whatever the axis.
        let limit = if t.shape().len() == 1 {
            t.shape()[0]
        } else if axis == 0 {
            rows
        } else {
            cols
        };
        if start >= end || end > limit {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("[{start}, {end}) out of range for axis {axis} of {}", t.shape_string()),
            });
        }
        let value = if t.shape().len() == 1 {
            Tensor::new(vec![end - start], t.data()[start..end].to_vec())?
        } else if axis == 0 {
            Tensor::new(vec![end - start, cols], t.data()[start * cols..end * cols].to_vec())?
        } else {
            let mut data = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                data.extend_from_slice(&t.data()[r * cols + start..r * cols + end]);
            }
            Tensor::new(vec![rows, end - start], data)?
        };
        let requires = self.requires(x);
        Ok(self.push(value, requires, Op::Slice(x, axis, start, end)))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Adjoints are computed in scratch
    /// buffers and added into each requiring node's persistent gradient,
    /// so repeated calls accumulate.
    pub fn backward(&mut self, root: Id) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {}",
                self.value(root).shape_string()
            )));
        }
        let n = self.nodes.len();
        let mut adjoint: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adjoint[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let dy = match adjoint[i].take() {
                Some(d) => d,
                None => continue,
            };
            if !self.nodes[i].requires {
                continue;
            }
            // accumulate into the persistent buffer
            {
                let node = &mut self.nodes[i];
                let grad = node.grad.get_or_insert_with(|| vec![0.0; node.value.numel()]);
                for (g, d) in grad.iter_mut().zip(dy.iter()) {
                    *g += d;
                }
            }
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &dy, &mut adjoint);
        }
        Ok(())
    }

    fn acc(&self, adjoint: &mut [Option<Vec<f64>>], id: Id, contrib: impl Fn(usize) -> f64) {
        if !self.nodes[id.0].requires {
            return;
        }
        let slot = adjoint[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
        for (k, g) in slot.iter_mut().enumerate() {
            *g += contrib(k);
        }
    }

    /// For broadcast binary ops: accumulate dy into b, folding the
    /// broadcast dimension.
    fn acc_broadcast(&self, adjoint: &mut [Option<Vec<f64>>], b: Id, dy: &[f64], sign: f64, factor: Option<&[f64]>) {
        if !self.nodes[b.0].requires {
            return;
        }
        let bn = self.nodes[b.0].value.numel();
        let slot = adjoint[b.0].get_or_insert_with(|| vec![0.0; bn]);
        for (i, &d) in dy.iter().enumerate() {
            let f = factor.map_or(1.0, |f| f[i]);
            slot[i % bn] += sign * d * f;
        }
    }

    fn propagate(&self, i: usize, op: &Op, dy: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(adjoint, *a, |k| dy[k]);
                self.acc_broadcast(adjoint, *b, dy, 1.0, None);
            }
            Op::Sub(a, b) => {
                self.acc(adjoint, *a, |k| dy[k]);
                self.acc_broadcast(adjoint, *b, dy, -1.0, None);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.data().to_vec(), self.nodes[b.0].value.data().to_vec());
                let bn = bv.len();
                self.acc(adjoint, *a, |k| dy[k] * bv[k % bn]);
                self.acc_broadcast(adjoint, *b, dy, 1.0, Some(&av));
            }
            Op::Neg(x) => self.acc(adjoint, *x, |k| -dy[k]),
            Op::Exp(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(adjoint, *x, |k| dy[k] * y[k]);
            }
            Op::Log(x) => {
                let xv = self.nodes[x.0].value.data().to_vec();
                self.acc(adjoint, *x, |k| dy[k] / xv[k]);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(adjoint, *x, |k| dy[k] * y[k] * (1.0 - y[k]));
            }
            Op::LogSigmoid(x) => {
                let xv = self.nodes[x.0].value.data().to_vec();
                self.acc(adjoint, *x, |k| dy[k] * sigmoid(-xv[k]));
            }
            Op::SoftmaxRow(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let (rows, cols) = self.nodes[i].value.rows_cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let off = r * cols;
                    let dot: f64 = (0..cols).map(|c| dy[off + c] * y[off + c]).sum();
                    for c in 0..cols {
                        dx[off + c] = y[off + c] * (dy[off + c] - dot);
                    }
                }
                self.acc(adjoint, *x, |k| dx[k]);
            }
            Op::LogSoftmaxRow(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let (rows, cols) = self.nodes[i].value.rows_cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let off = r * cols;
                    let dsum: f64 = (0..cols).map(|c| dy[off + c]).sum();
                    for c in 0..cols {
                        dx[off + c] = dy[off + c] - libm::exp(y[off + c]) * dsum;
                    }
                }
                self.acc(adjoint, *x, |k| dx[k]);
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[a.0].value.rows_cols();
                let (_, n) = self.nodes[b.0].value.rows_cols();
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                if self.nodes[a.0].requires {
                    // dA = dY B^T
                    let bt = transpose_raw(&bv, k, n);
                    let da = matmul_raw(dy, &bt, m, n, k);
                    self.acc(adjoint, *a, |idx| da[idx]);
                }
                if self.nodes[b.0].requires {
                    // dB = A^T dY
                    let at = transpose_raw(&av, m, k);
                    let db = matmul_raw(&at, dy, k, m, n);
                    self.acc(adjoint, *b, |idx| db[idx]);
                }
            }
            Op::Transpose(x) => {
                let (rows, cols) = self.nodes[i].value.rows_cols();
                let dx = transpose_raw(dy, rows, cols);
                self.acc(adjoint, *x, |k| dx[k]);
            }
            Op::Embed(table, indices) => {
                if !self.nodes[table.0].requires {
                    return;
                }
                let (_, d) = self.nodes[table.0].value.rows_cols();
                let tn = self.nodes[table.0].value.numel();
                let slot = adjoint[table.0].get_or_insert_with(|| vec![0.0; tn]);
                for (t, &row) in indices.iter().enumerate() {
                    for c in 0..d {
                        slot[row * d + c] += dy[t * d + c];
                    }
                }
            }
            Op::PickPerRow(m, indices) => {
                if !self.nodes[m.0].requires {
                    return;
                }
                let (_, cols) = self.nodes[m.0].value.rows_cols();
                let mn = self.nodes[m.0].value.numel();
                let slot = adjoint[m.0].get_or_insert_with(|| vec![0.0; mn]);
                for (r, &c) in indices.iter().enumerate() {
                    slot[r * cols + c] += dy[r];
                }
            }
            Op::Sum(x) => self.acc(adjoint, *x, |_| dy[0]),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                self.acc(adjoint, *x, |_| dy[0] / n);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(adjoint, *x, |k| dy[k] * c);
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data().to_vec();
                self.acc(adjoint, *x, |k| if xv[k] > 0.0 { dy[k] } else { 0.0 });
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let xv = self.nodes[x.0].value.data().to_vec();
                self.acc(adjoint, *x, |k| if xv[k] > lo && xv[k] < hi { dy[k] } else { 0.0 });
            }
            Op::LayerNorm(x, rstds) => {
                let y = self.nodes[i].value.data().to_vec();
                let (rows, cols) = self.nodes[i].value.rows_cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let off = r * cols;
                    let n = cols as f64;
                    let mean_dy: f64 = (0..cols).map(|c| dy[off + c]).sum::<f64>() / n;
                    let mean_dyy: f64 = (0..cols).map(|c| dy[off + c] * y[off + c]).sum::<f64>() / n;
                    for c in 0..cols {
                        dx[off + c] = rstds[r] * (dy[off + c] - mean_dy - y[off + c] * mean_dyy);
                    }
                }
                self.acc(adjoint, *x, |k| dx[k]);
            }
            Op::Concat(axis, parts) => {
                let (_, total_cols) = self.nodes[i].value.rows_cols();
                if *axis == 1 {
                    let mut col_off = 0;
                    for &p in parts {
                        let (rows, c) = self.nodes[p.0].value.rows_cols();
                        if self.nodes[p.0].requires {
                            let mut dp = vec![0.0; rows * c];
                            for r in 0..rows {
                                dp[r * c..(r + 1) * c].copy_from_slice(
                                    &dy[r * total_cols + col_off..r * total_cols + col_off + c],
                                );
                            }
                            self.acc(adjoint, p, |k| dp[k]);
                        }
                        col_off += c;
                    }
                } else {
                    let mut off = 0;
                    for &p in parts {
                        let pn = self.nodes[p.0].value.numel();
                        if self.nodes[p.0].requires {
                            let dp = dy[off..off + pn].to_vec();
                            self.acc(adjoint, p, |k| dp[k]);
                        }
                        off += pn;
                    }
                }
            }
            Op::Slice(x, axis, start, end) => {
                if !self.nodes[x.0].requires {
                    return;
                }
                let (rows, cols) = self.nodes[x.0].value.rows_cols();
                let xn = self.nodes[x.0].value.numel();
                let slot = adjoint[x.0].get_or_insert_with(|| vec![0.0; xn]);
                if self.nodes[x.0].value.shape().len() == 1 || *axis == 0 {
                    let width = if self.nodes[x.0].value.shape().len() == 1 { 1 } else { cols };
                    for (k, &d) in dy.iter().enumerate() {
                        slot[start * width + k] += d;
                    }
                } else {
                    let w = end - start;
                    for r in 0..rows {
                        for c in 0..w {
                            slot[r * cols + start + c] += dy[r * w + c];
                        }
                    }
                }
            }
        }
    }
}

// ── scalar math helpers ─────────────────────────────────────────────

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// log σ(x) without overflow on either tail.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -libm::log1p(libm::exp(-x))
    } else {
        x - libm::log1p(libm::exp(x))
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
    for v in row.iter_mut() {
        *v -= lse;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for kk in 0..k {
            let av = a[r * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            for c in 0..n {
                orow[c] += av * brow[c];
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

// ── gradient checking ───────────────────────────────────────────────

/// Max relative error between an analytic gradient and central finite
/// differences, over the given coordinate sample.
///
/// `f` must be a pure scalar function of the flat parameter vector.
pub fn grad_check<F>(
    f: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    indices: &[usize],
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Contract(format!("step {h} outside [1e-7, 1e-3]")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Contract(format!(
            "gradient length {} != parameter length {}",
            analytic.len(),
            params.len()
        )));
    }
    let mut worst = 0.0f64;
    let mut scratch = params.to_vec();
    for &i in indices {
        scratch[i] = params[i] + h;
        let fp = f(&scratch)?;
        scratch[i] = params[i] - h;
        let fm = f(&scratch)?;
        scratch[i] = params[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("non-finite value at perturbed coordinate {i}")));
        }
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
