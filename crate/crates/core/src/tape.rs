//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. Handles are indices into the node list, so parents always
//! precede children and a single reverse sweep is a valid topological order.
//! Sampling never happens on the tape: stochastic masks enter as constants.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, softmax_in_place, Tensor};

/// Floor applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-30;
const LN_EPS: f64 = 1e-5;
/// Spread below which min-max normalization is treated as degenerate.
pub const MINMAX_DEGENERATE: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Recip(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Sum(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var),
    L2NormalizeRows(Var),
    Rows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Scatter(Var, Vec<usize>, f64),
    ColMax(Var, Vec<usize>),
    MinMax {
        src: Var,
        lo: usize,
        hi: usize,
        degenerate: bool,
    },
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; exactly zero when the loss
    /// does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(shape.clone(), g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// True when some gradient reached `var` during the sweep.
    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a (m×k) · bᵀ` with `b` of shape `n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.rows_cols();
        let (n, k2) = tb.rows_cols();
        if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
            return Err(dim_err("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = ta.row(i);
            for j in 0..n {
                out[i * n + j] = ar.iter().zip(tb.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(value, Op::MatMulT(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the length-`n` vector `row` to every row of the `m×n` matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = ta.rows_cols();
        if tr.numel() != n {
            return Err(dim_err("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for (d, r) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *d += r;
            }
        }
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies row `i` of `a` by `scale[i]`.
    pub fn scale_rows(&mut self, a: Var, scale: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(scale));
        let (m, n) = ta.rows_cols();
        if ts.numel() != m {
            return Err(dim_err("scale_rows", ta, ts));
        }
        let mut data = ta.data().to_vec();
        for (i, s) in ts.data().iter().enumerate() {
            data[i * n..(i + 1) * n].iter_mut().for_each(|d| *d *= s);
        }
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::ScaleRows(a, scale), &[a, scale]))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let value = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect());
        self.push(value, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a, c), |x| x + c)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.map(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), |x| x.max(LOG_FLOOR).ln())
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), |x| gelu(x).0)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = ta.rows_cols();
        let mut data = ta.data().to_vec();
        for i in 0..m {
            softmax_in_place(&mut data[i * n..(i + 1) * n]);
        }
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = ta.rows_cols();
        let mut data = ta.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(value, Op::LogSoftmaxRows(a), &[a])
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = ta.rows_cols();
        let mut data = ta.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
        }
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(value, Op::LayerNormRows(a), &[a])
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.rows_cols();
        let mut data = ta.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-150 {
                return Err(Error::Numeric(format!("row {i} has zero norm")));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::L2NormalizeRows(a), &[a]))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.rows_cols();
        if len == 0 || start + len > m {
            return Err(Error::Index { index: start + len, len: m });
        }
        let value = Tensor::from_parts(vec![len, n], ta.data()[start * n..(start + len) * n].to_vec());
        Ok(self.push(value, Op::Rows(a, start), &[a]))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.rows(a, i, 1)
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let n = self.value(*first).rows_cols().1;
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            let t = self.value(*p);
            let (r, c) = t.rows_cols();
            if c != n {
                return Err(dim_err("concat_rows", self.value(*first), t));
            }
            data.extend_from_slice(t.data());
            m += r;
        }
        let value = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows by index.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.rows_cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Index { index: bad, len: m });
        }
        if idx.is_empty() {
            return Err(Error::Contract("gather of no rows".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(ta.row(i));
        }
        let value = Tensor::from_parts(vec![idx.len(), n], data);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// Selects elements of the flattened buffer into a vector.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= ta.numel()) {
            return Err(Error::Index { index: bad, len: ta.numel() });
        }
        if idx.is_empty() {
            return Err(Error::Contract("gather of no elements".into()));
        }
        let value = Tensor::from_parts(vec![idx.len()], idx.iter().map(|&i| ta.data()[i]).collect());
        Ok(self.push(value, Op::Gather(a, idx.to_vec()), &[a]))
    }

    /// Writes `src[k]` to position `idx[k]` of a length-`len` vector filled with `fill`.
    pub fn scatter(&mut self, src: Var, idx: &[usize], len: usize, fill: f64) -> Result<Var> {
        let ts = self.value(src);
        if ts.numel() != idx.len() {
            return Err(Error::Dimension {
                op: "scatter",
                left: ts.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::Index { index: bad, len });
        }
        let mut data = vec![fill; len];
        for (k, &i) in idx.iter().enumerate() {
            data[i] = ts.data()[k];
        }
        let value = Tensor::from_parts(vec![len], data);
        Ok(self.push(value, Op::Scatter(src, idx.to_vec(), fill), &[src]))
    }

    /// Column-wise maximum of a matrix, as a vector.
    pub fn col_max(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = ta.rows_cols();
        let mut arg = vec![0usize; n];
        let mut out = ta.row(0).to_vec();
        for i in 1..m {
            for (j, v) in ta.row(i).iter().enumerate() {
                if *v > out[j] {
                    out[j] = *v;
                    arg[j] = i;
                }
            }
        }
        let value = Tensor::from_parts(vec![n], out);
        self.push(value, Op::ColMax(a, arg), &[a])
    }

    /// Rescales a vector to `[0, 1]` by its own minimum and maximum. When the
    /// spread is below [`MINMAX_DEGENERATE`] every entry maps to 0.5 with zero gradient.
    pub fn min_max_normalize(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let xs = ta.data();
        let (mut lo, mut hi) = (0, 0);
        for (i, v) in xs.iter().enumerate() {
            if *v < xs[lo] {
                lo = i;
            }
            if *v > xs[hi] {
                hi = i;
            }
        }
        let range = xs[hi] - xs[lo];
        let degenerate = range < MINMAX_DEGENERATE;
        let data = if degenerate {
            vec![0.5; xs.len()]
        } else {
            xs.iter().map(|v| (v - xs[lo]) / range).collect()
        };
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(value, Op::MinMax { src: a, lo, hi, degenerate }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Re-evaluates the recorded computation with some leaf values replaced.
    /// Constants keep their recorded values, so the result is the function
    /// whose gradient [`Tape::backward`] computes, stop-gradients included.
    pub fn replay(&self, leaves: &[(Var, Tensor)]) -> Result<Tape> {
        let mut out = Tape::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Leaf => {
                    let value = leaves.iter().find(|(v, _)| v.0 == i).map_or_else(|| node.value.clone(), |(_, t)| t.clone());
                    if value.shape() != node.value.shape() {
                        return Err(dim_err("replay", &node.value, &value));
                    }
                    match node.requires_grad {
                        true => out.param(value),
                        false => out.constant(value),
                    }
                }
                Op::MatMul(a, b) => out.matmul(*a, *b)?,
                Op::MatMulT(a, b) => out.matmul_t(*a, *b)?,
                Op::Add(a, b) => out.add(*a, *b)?,
                Op::Sub(a, b) => out.sub(*a, *b)?,
                Op::Mul(a, b) => out.mul(*a, *b)?,
                Op::AddRow(a, b) => out.add_row(*a, *b)?,
                Op::ScaleRows(a, b) => out.scale_rows(*a, *b)?,
                Op::Scale(a, c) => out.scale(*a, *c),
                Op::AddScalar(a, c) => out.add_scalar(*a, *c),
                Op::Recip(a) => out.recip(*a),
                Op::Exp(a) => out.exp(*a),
                Op::Log(a) => out.log(*a),
                Op::Gelu(a) => out.gelu(*a),
                Op::Sum(a) => out.sum(*a),
                Op::SoftmaxRows(a) => out.softmax_rows(*a),
                Op::LogSoftmaxRows(a) => out.log_softmax_rows(*a),
                Op::LayerNormRows(a) => out.layer_norm_rows(*a),
                Op::L2NormalizeRows(a) => out.l2_normalize_rows(*a)?,
                Op::Rows(a, start) => out.rows(*a, *start, node.value.rows_cols().0)?,
                Op::ConcatRows(parts) => out.concat_rows(parts)?,
                Op::GatherRows(a, idx) => out.gather_rows(*a, idx)?,
                Op::Gather(a, idx) => out.gather(*a, idx)?,
                Op::Scatter(a, idx, fill) => out.scatter(*a, idx, node.value.numel(), *fill)?,
                Op::ColMax(a, _) => out.col_max(*a),
                Op::MinMax { src, .. } => out.min_max_normalize(*src),
                Op::Reshape(a) => out.reshape(*a, node.value.shape().to_vec())?,
            };
            debug_assert_eq!(v.0, i);
        }
        Ok(out)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulates `f(buffer)` into the gradient slot of `v` when it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.rows_cols();
                let n = tb.rows_cols().1;
                if wants(*a) {
                    let bt = tb.transpose();
                    acc(*a, &mut |s| matmul_into(g, bt.data(), s, m, n, k));
                }
                if wants(*b) {
                    let at = ta.transpose();
                    acc(*b, &mut |s| matmul_into(at.data(), g, s, k, m, n));
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.rows_cols();
                let n = tb.rows_cols().0;
                if wants(*a) {
                    acc(*a, &mut |s| matmul_into(g, tb.data(), s, m, n, k));
                }
                if wants(*b) {
                    let gt = Tensor::from_parts(vec![m, n], g.to_vec()).transpose();
                    acc(*b, &mut |s| matmul_into(gt.data(), ta.data(), s, n, m, k));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((s, g), bv) in s.iter_mut().zip(g).zip(tb.data()) {
                        *s += g * bv;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), av) in s.iter_mut().zip(g).zip(ta.data()) {
                        *s += g * av;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = val(*row).numel();
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*row, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % n] += gv;
                    }
                });
            }
            Op::ScaleRows(a, scale) => {
                let (ta, ts) = (val(*a), val(*scale));
                let n = ta.rows_cols().1;
                acc(*a, &mut |s| {
                    for (i, (s, gv)) in s.iter_mut().zip(g).enumerate() {
                        *s += gv * ts.data()[i / n];
                    }
                });
                acc(*scale, &mut |s| {
                    for (i, (gv, av)) in g.iter().zip(ta.data()).enumerate() {
                        s[i / n] += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)),
            Op::AddScalar(a, _) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Recip(a) => acc(*a, &mut |s| {
                for ((s, gv), yv) in s.iter_mut().zip(g).zip(y.data()) {
                    *s -= gv * yv * yv;
                }
            }),
            Op::Exp(a) => acc(*a, &mut |s| {
                for ((s, gv), yv) in s.iter_mut().zip(g).zip(y.data()) {
                    *s += gv * yv;
                }
            }),
            Op::Log(a) => {
                let ta = val(*a);
                acc(*a, &mut |s| {
                    for ((s, gv), xv) in s.iter_mut().zip(g).zip(ta.data()) {
                        if *xv > LOG_FLOOR {
                            *s += gv / xv;
                        }
                    }
                })
            }
            Op::Gelu(a) => {
                let ta = val(*a);
                acc(*a, &mut |s| {
                    for ((s, gv), xv) in s.iter_mut().zip(g).zip(ta.data()) {
                        *s += gv * gelu(*xv).1;
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::SoftmaxRows(a) => {
                let (m, n) = y.rows_cols();
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let (yr, gr) = (&y.data()[r.clone()], &g[r.clone()]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((s, yv), gv) in s[r].iter_mut().zip(yr).zip(gr) {
                            *s += yv * (gv - dot);
                        }
                    }
                })
            }
            Op::LogSoftmaxRows(a) => {
                let (m, n) = y.rows_cols();
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let (yr, gr) = (&y.data()[r.clone()], &g[r.clone()]);
                        let gsum: f64 = gr.iter().sum();
                        for ((s, yv), gv) in s[r].iter_mut().zip(yr).zip(gr) {
                            *s += gv - yv.exp() * gsum;
                        }
                    }
                })
            }
            Op::LayerNormRows(a) => {
                let ta = val(*a);
                let (m, n) = y.rows_cols();
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let xr = &ta.data()[r.clone()];
                        let mean = xr.iter().sum::<f64>() / n as f64;
                        let var = xr.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let (yr, gr) = (&y.data()[r.clone()], &g[r.clone()]);
                        let gmean = gr.iter().sum::<f64>() / n as f64;
                        let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((s, yv), gv) in s[r].iter_mut().zip(yr).zip(gr) {
                            *s += inv * (gv - gmean - yv * gy);
                        }
                    }
                })
            }
            Op::L2NormalizeRows(a) => {
                let ta = val(*a);
                let (m, n) = y.rows_cols();
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let norm = ta.data()[r.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
                        let (yr, gr) = (&y.data()[r.clone()], &g[r.clone()]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((s, yv), gv) in s[r].iter_mut().zip(yr).zip(gr) {
                            *s += (gv - yv * dot) / norm;
                        }
                    }
                })
            }
            Op::Rows(a, start) => {
                let n = y.rows_cols().1;
                acc(*a, &mut |s| {
                    for (s, gv) in s[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *s += gv;
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).numel();
                    let chunk = &g[offset..offset + len];
                    acc(*p, &mut |s| s.iter_mut().zip(chunk).for_each(|(s, g)| *s += g));
                    offset += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let n = y.rows_cols().1;
                acc(*a, &mut |s| {
                    for (k, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            s[i * n + c] += g[k * n + c];
                        }
                    }
                })
            }
            Op::Gather(a, idx) => acc(*a, &mut |s| {
                for (k, &i) in idx.iter().enumerate() {
                    s[i] += g[k];
                }
            }),
            Op::Scatter(src, idx, _) => acc(*src, &mut |s| {
                for (k, &i) in idx.iter().enumerate() {
                    s[k] += g[i];
                }
            }),
            Op::ColMax(a, arg) => {
                let n = y.numel();
                acc(*a, &mut |s| {
                    for (j, &i) in arg.iter().enumerate() {
                        s[i * n + j] += g[j];
                    }
                })
            }
            Op::MinMax { src, lo, hi, degenerate } => {
                if *degenerate {
                    return;
                }
                let xs = val(*src).data();
                let range = xs[*hi] - xs[*lo];
                let gsum: f64 = g.iter().sum();
                let gy: f64 = g.iter().zip(y.data()).map(|(a, b)| a * b).sum();
                acc(*src, &mut |s| {
                    for (s, gv) in s.iter_mut().zip(g) {
                        *s += gv / range;
                    }
                    s[*lo] += (gy - gsum) / range;
                    s[*hi] -= gy / range;
                })
            }
            Op::Reshape(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
        }
    }
}
