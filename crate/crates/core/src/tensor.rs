//! Dense `f64` matrices, vectors and order-3 tensors.
//!
//! Layout conventions:
//! - [`Matrix`] is row-major: entry `(i, j)` lives at `i * cols + j`.
//! - [`Tensor3`] stores entry `(i, j, k)` at `i + d1 * (j + d2 * k)`, so `i`
//!   varies fastest, then `j`, then `k`. Frontal slice `k` is therefore one
//!   contiguous block.
//! - [`mode_unfold`] puts the chosen mode on the rows; columns enumerate the
//!   two remaining modes in ascending mode order with the lower mode varying
//!   fastest. For mode 1 the column of `(j, k)` is `j + d2 * k`, for mode 2
//!   the column of `(i, k)` is `i + d1 * k`, for mode 3 the column of `(i, j)`
//!   is `i + d1 * j`.
//!
//! All products accumulate in ascending inner-index order starting from
//! `0.0`, so results are bit-reproducible.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, Index, IndexMut};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major entries, rejecting a length mismatch or
    /// any non-finite entry.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::argument(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(x) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {x}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::argument("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Self { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape { op: "matmul", left: self.shape(), right: other.shape() });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate().take(k) {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape { op, left: self.shape(), right: other.shape() });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| x * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Multiplies every row elementwise by the `1 × cols` row `s`; this is
    /// `self · diag(s)`.
    pub fn mul_row_broadcast(&self, s: &Matrix) -> Result<Matrix> {
        if s.rows != 1 || s.cols != self.cols {
            return Err(Error::Shape { op: "mul_row_broadcast", left: self.shape(), right: s.shape() });
        }
        Ok(Matrix::from_fn(self.rows, self.cols, |i, j| self[(i, j)] * s.data[j]))
    }

    /// Adds the `1 × cols` row `b` to every row.
    pub fn add_row_broadcast(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows != 1 || b.cols != self.cols {
            return Err(Error::Shape { op: "add_row_broadcast", left: self.shape(), right: b.shape() });
        }
        Ok(Matrix::from_fn(self.rows, self.cols, |i, j| self[(i, j)] + b.data[j]))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape { op: "vstack", left: (rows, cols), right: p.shape() });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Copies rows `start..start + len` into a new matrix.
    pub fn rows_range(&self, start: usize, len: usize) -> Matrix {
        Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self(vec![value; len])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if let Some(x) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("vector entry {x}")));
        }
        Ok(Self(data))
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    /// View as a `1 × len` matrix.
    pub fn to_row(&self) -> Matrix {
        Matrix::row_vector(&self.0)
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<&[f64]> for Vector {
    fn from(values: &[f64]) -> Self {
        Self(values.to_vec())
    }
}

/// Order-3 dense tensor with `i`-fastest layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d1: usize, d2: usize, d3: usize) -> Self {
        Self { dims: [d1, d2, d3], data: vec![0.0; d1 * d2 * d3] }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::argument(format!("{} entries cannot fill a {dims:?} tensor", data.len())));
        }
        if let Some(x) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {x}")));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dims[0], dims[1], dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    t[(i, j, k)] = f(i, j, k);
                }
            }
        }
        t
    }

    /// Stacks `d1 × d2` matrices along the third mode.
    pub fn from_slices(slices: &[Matrix]) -> Result<Self> {
        let (d1, d2) = slices.first().map_or((0, 0), Matrix::shape);
        let mut t = Self::zeros(d1, d2, slices.len());
        for (k, s) in slices.iter().enumerate() {
            t.set_slice(k, s)?;
        }
        Ok(t)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        let [d1, d2, d3] = self.dims;
        debug_assert!(i < d1 && j < d2 && k < d3);
        i + d1 * (j + d2 * k)
    }

    /// Frontal slice `k` as a `d1 × d2` matrix.
    pub fn slice(&self, k: usize) -> Result<Matrix> {
        let [d1, d2, d3] = self.dims;
        if k >= d3 {
            return Err(Error::argument(format!("slice {k} out of range for {d3} slices")));
        }
        Ok(Matrix::from_fn(d1, d2, |i, j| self[(i, j, k)]))
    }

    pub fn set_slice(&mut self, k: usize, m: &Matrix) -> Result<()> {
        let [d1, d2, d3] = self.dims;
        if k >= d3 {
            return Err(Error::argument(format!("slice {k} out of range for {d3} slices")));
        }
        if m.shape() != (d1, d2) {
            return Err(Error::Shape { op: "set_slice", left: (d1, d2), right: m.shape() });
        }
        for j in 0..d2 {
            for i in 0..d1 {
                let o = self.offset(i, j, k);
                self.data[o] = m[(i, j)];
            }
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Tensor3 {
        Tensor3 { dims: self.dims, data: self.data.iter().map(|x| x * c).collect() }
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        if self.dims != other.dims {
            return Err(Error::argument(format!("tensor dims {:?} vs {:?}", self.dims, other.dims)));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor3 { dims: self.dims, data })
    }
}

impl Index<(usize, usize, usize)> for Tensor3 {
    type Output = f64;

    fn index(&self, (i, j, k): (usize, usize, usize)) -> &f64 {
        &self.data[self.offset(i, j, k)]
    }
}

impl IndexMut<(usize, usize, usize)> for Tensor3 {
    fn index_mut(&mut self, (i, j, k): (usize, usize, usize)) -> &mut f64 {
        let o = self.offset(i, j, k);
        &mut self.data[o]
    }
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `Softmax((Xq·Wq)(Xk·Wk)ᵀ / √d) · (Xv·Wv)` for a single head.
pub fn scaled_dot_attention(
    xq: &Matrix,
    xk: &Matrix,
    xv: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
) -> Result<Matrix> {
    if xk.rows() != xv.rows() {
        return Err(Error::Shape { op: "attention keys/values", left: xk.shape(), right: xv.shape() });
    }
    let q = xq.matmul(wq)?;
    let k = xk.matmul(wk)?;
    let v = xv.matmul(wv)?;
    attention_from_projections(&q, &k, &v)
}

/// Attention over already-projected queries, keys and values.
pub fn attention_from_projections(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    let scores = q.matmul(&k.transpose())?.scale(attention_scale(q.cols()));
    softmax_rows(&scores).matmul(v)
}

/// The `1/√d` factor applied to attention scores.
pub fn attention_scale(d: usize) -> f64 {
    1.0 / libm::sqrt(d as f64)
}

/// Rank-one tensor `u ∘ v ∘ p`.
pub fn outer3(u: &[f64], v: &[f64], p: &[f64]) -> Tensor3 {
    Tensor3::from_fn([u.len(), v.len(), p.len()], |i, j, k| u[i] * v[j] * p[k])
}

fn check_mode(mode: usize) -> Result<()> {
    if !(1..=3).contains(&mode) {
        return Err(Error::argument(format!("mode {mode} is not one of 1, 2, 3")));
    }
    Ok(())
}

/// Mode-`mode` matricization (`mode` in `1..=3`); see the module docs for
/// the column order.
pub fn mode_unfold(t: &Tensor3, mode: usize) -> Result<Matrix> {
    check_mode(mode)?;
    let [d1, d2, d3] = t.dims();
    let out = match mode {
        1 => Matrix::from_fn(d1, d2 * d3, |i, c| t[(i, c % d2, c / d2)]),
        2 => Matrix::from_fn(d2, d1 * d3, |j, c| t[(c % d1, j, c / d1)]),
        _ => Matrix::from_fn(d3, d1 * d2, |k, c| t[(c % d1, c / d1, k)]),
    };
    Ok(out)
}

/// Inverse of [`mode_unfold`] for a tensor of shape `dims`.
pub fn refold(m: &Matrix, mode: usize, dims: [usize; 3]) -> Result<Tensor3> {
    check_mode(mode)?;
    let [d1, d2, d3] = dims;
    let expected = match mode {
        1 => (d1, d2 * d3),
        2 => (d2, d1 * d3),
        _ => (d3, d1 * d2),
    };
    if m.shape() != expected {
        return Err(Error::Shape { op: "refold", left: expected, right: m.shape() });
    }
    let t = match mode {
        1 => Tensor3::from_fn(dims, |i, j, k| m[(i, j + d2 * k)]),
        2 => Tensor3::from_fn(dims, |i, j, k| m[(j, i + d1 * k)]),
        _ => Tensor3::from_fn(dims, |i, j, k| m[(k, i + d1 * j)]),
    };
    Ok(t)
}

/// Frobenius norm: the Euclidean norm of the entries in storage order.
pub fn frobenius(t: &Tensor3) -> f64 {
    libm::sqrt(t.as_slice().iter().map(|x| x * x).sum())
}
