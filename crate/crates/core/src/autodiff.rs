//! A small reverse-mode tape over dense matrices.
//!
//! Every forward value is a [`Matrix`]; scalars are `1 × 1`. Nodes are
//! appended in evaluation order, so the tape is already topologically sorted
//! and [`Tape::backward`] is a single reverse sweep. Only nodes downstream of
//! a parameter leaf carry gradients; frozen subgraphs are skipped.
//!
//! Forward values are computed with the same [`Matrix`] routines the plain
//! (non-differentiable) code paths use, so a tape forward pass and a plain
//! pass over the same inputs agree bit for bit.

use alloc::vec;
use alloc::vec::Vec;

use crate::align::sigmoid;
use crate::tensor::{softmax_rows, Matrix};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    MulRowBroadcast(Var, Var),
    AddRowBroadcast(Var, Var),
    SoftmaxRows(Var),
    Tanh(Var),
    Sigmoid(Var),
    Row(Var, usize),
    VStack(Vec<Var>),
    SetRow(Var, usize, Var),
    NormalizeRows(Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    /// Gradient of a tracked node; all-zero when the output does not depend
    /// on it.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Matrix {
        self.grads[var.0].clone().unwrap_or_else(|| {
            let (r, c) = tape.value(var).shape();
            Matrix::zeros(r, c)
        })
    }
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

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.value(var)[(0, 0)]
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Hadamard(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// `a · diag(s)` for a `1 × cols` row `s`.
    pub fn mul_row_broadcast(&mut self, a: Var, s: Var) -> Result<Var> {
        let v = self.value(a).mul_row_broadcast(self.value(s))?;
        Ok(self.push(v, Op::MulRowBroadcast(a, s), &[a, s]))
    }

    /// Adds the `1 × cols` row `b` to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add_row_broadcast(self.value(b))?;
        Ok(self.push(v, Op::AddRowBroadcast(a, b), &[a, b]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Row `i` of `a` as a `1 × cols` node.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let m = self.value(a);
        if i >= m.rows() {
            return Err(Error::Shape { op: "row", left: m.shape(), right: (i, 0) });
        }
        let v = m.rows_range(i, 1);
        Ok(self.push(v, Op::Row(a, i), &[a]))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::vstack(&mats)?;
        Ok(self.push(v, Op::VStack(parts.to_vec()), parts))
    }

    /// Copy of `base` with row `i` replaced by the `1 × cols` node `row`.
    pub fn set_row(&mut self, base: Var, i: usize, row: Var) -> Result<Var> {
        let (b, r) = (self.value(base), self.value(row));
        if r.rows() != 1 || r.cols() != b.cols() || i >= b.rows() {
            return Err(Error::Shape { op: "set_row", left: b.shape(), right: r.shape() });
        }
        let mut v = b.clone();
        v.row_mut(i).copy_from_slice(r.row(0));
        Ok(self.push(v, Op::SetRow(base, i, row), &[base, row]))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let v = normalize_rows(self.value(a));
        self.push(v, Op::NormalizeRows(a), &[a])
    }

    /// Mean softmax cross-entropy of each row of `logits` against its target
    /// column; a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = cross_entropy(self.value(logits), targets)?;
        Ok(self.push(Matrix::row_vector(&[v]), Op::CrossEntropy(logits, targets.to_vec()), &[logits]))
    }

    /// Reverse sweep from the scalar `output` with seed `d output = 1`.
    pub fn backward(&self, output: Var) -> Grads {
        self.backward_scaled(output, 1.0)
    }

    /// Reverse sweep with an arbitrary seed, i.e. the gradient of
    /// `seed · output`.
    pub fn backward_scaled(&self, output: Var, seed: f64) -> Grads {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::row_vector(&[seed]));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.tracked {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], var: Var, delta: Matrix) {
        if !self.nodes[var.0].tracked {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => {
                for (a, d) in acc.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        // Shapes were validated on the forward pass, so the products below
        // cannot fail.
        let mm = |a: &Matrix, b: &Matrix| a.matmul(b).expect("shapes checked on forward");
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                self.accumulate(grads, *a, mm(g, &val(b).transpose()));
                self.accumulate(grads, *b, mm(&val(a).transpose(), g));
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                self.accumulate(grads, *a, g.hadamard(val(b)).expect("same shape"));
                self.accumulate(grads, *b, g.hadamard(val(a)).expect("same shape"));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::MulRowBroadcast(a, s) => {
                self.accumulate(grads, *a, g.mul_row_broadcast(val(s)).expect("same shape"));
                let prod = g.hadamard(val(a)).expect("same shape");
                self.accumulate(grads, *s, column_sums(&prod));
            }
            Op::AddRowBroadcast(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, column_sums(g));
            }
            Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gy = g.row(i);
                    let inner: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for (j, dj) in d.row_mut(i).iter_mut().enumerate() {
                        *dj = y[j] * (gy[j] - inner);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = Matrix::from_fn(out.rows(), out.cols(), |i, j| g[(i, j)] * (1.0 - out[(i, j)] * out[(i, j)]));
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = Matrix::from_fn(out.rows(), out.cols(), |i, j| g[(i, j)] * out[(i, j)] * (1.0 - out[(i, j)]));
                self.accumulate(grads, *a, d);
            }
            Op::Row(a, i) => {
                let (r, c) = val(a).shape();
                let mut d = Matrix::zeros(r, c);
                d.row_mut(*i).copy_from_slice(g.row(0));
                self.accumulate(grads, *a, d);
            }
            Op::VStack(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = val(p).rows();
                    self.accumulate(grads, *p, g.rows_range(start, rows));
                    start += rows;
                }
            }
            Op::SetRow(base, i, row) => {
                let mut d = g.clone();
                d.row_mut(*i).iter_mut().for_each(|x| *x = 0.0);
                self.accumulate(grads, *base, d);
                self.accumulate(grads, *row, g.rows_range(*i, 1));
            }
            Op::NormalizeRows(a) => {
                let x = val(a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let norm = libm::sqrt(x.row(i).iter().map(|v| v * v).sum());
                    let y = out.row(i);
                    let gy = g.row(i);
                    let inner: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for (j, dj) in d.row_mut(i).iter_mut().enumerate() {
                        *dj = (gy[j] - y[j] * inner) / norm;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::CrossEntropy(logits, targets) => {
                let x = val(logits);
                let mut d = softmax_rows(x);
                let scale = g[(0, 0)] / x.rows() as f64;
                for (i, &t) in targets.iter().enumerate() {
                    d[(i, t)] -= 1.0;
                }
                self.accumulate(grads, *logits, d.scale(scale));
            }
        }
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut s = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (acc, x) in s.as_mut_slice().iter_mut().zip(m.row(i)) {
            *acc += x;
        }
    }
    s
}

/// Rows scaled to unit Euclidean norm.
pub fn normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let norm = libm::sqrt(m.row(i).iter().map(|v| v * v).sum());
        out.row_mut(i).iter_mut().for_each(|x| *x /= norm);
    }
    out
}

/// Mean over rows of `logsumexp(row) − row[target]`.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    if targets.len() != logits.rows() || logits.rows() == 0 {
        return Err(Error::Shape { op: "cross_entropy", left: logits.shape(), right: (targets.len(), 1) });
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        if t >= row.len() {
            return Err(Error::argument(alloc::format!("target {t} out of range for {} classes", row.len())));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(row.iter().map(|x| libm::exp(x - max)).sum::<f64>());
        total += lse - row[t];
    }
    Ok(total / logits.rows() as f64)
}
