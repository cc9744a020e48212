//! Modality alignment: batch context enhancement and the gated query blend.

use alloc::format;
use alloc::vec::Vec;

use crate::tensor::{softmax_in_place, softmax_rows, Matrix, Vector};
use crate::{Error, Result};

/// Pooled features for one batch: fusion features `F` and text query
/// features `T`, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchFeatures {
    pub fusion: Matrix,
    pub query: Matrix,
}

impl BatchFeatures {
    pub fn new(fusion: Matrix, query: Matrix) -> Result<Self> {
        if fusion.shape() != query.shape() {
            return Err(Error::Shape { op: "batch features", left: fusion.shape(), right: query.shape() });
        }
        if fusion.rows() == 0 {
            return Err(Error::argument("empty batch"));
        }
        Ok(Self { fusion, query })
    }
}

/// How pooled fusion features absorb in-batch text context before the
/// matching head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContextMode {
    /// Attention over every query in the batch, the item's own included.
    #[default]
    Enhance,
    /// No enhancement: `F' = F`.
    Off,
    /// Attention over random Gaussian vectors in place of the queries.
    Random,
    /// Uniform weights: `F' = F + mean(T)`.
    Mean,
}

/// Context enhancement.
///
/// `α[i, j] = softmax_j(f_i · t_j)` and `f'_i = f_i + Σ_j α[i, j] t_j`.
/// Returns `(α, F')`.
pub fn context_enhance(batch: &BatchFeatures) -> Result<(Matrix, Matrix)> {
    let scores = batch.fusion.matmul(&batch.query.transpose())?;
    let alpha = softmax_rows(&scores);
    let enhanced = batch.fusion.add(&alpha.matmul(&batch.query)?)?;
    Ok((alpha, enhanced))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    /// Softmax across the feature dimension; gates sum to one.
    #[default]
    Softmax,
    /// Independent logistic gate per feature.
    Sigmoid,
}

/// Elementwise query transform `t' = tanh(γ ⊙ t) + β`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub gamma: Vector,
    pub beta: Vector,
}

impl GateParams {
    pub fn zeros(width: usize) -> Self {
        Self { gamma: Vector::zeros(width), beta: Vector::zeros(width) }
    }

    pub fn ones(width: usize) -> Self {
        Self { gamma: Vector::filled(width, 1.0), beta: Vector::filled(width, 1.0) }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Gated query transformation for one item.
///
/// `t' = tanh(γ ⊙ t) + β`, `z = t' ⊙ f`, `g = gate(z)`, and the result is
/// `g ⊙ f + (1 − g) ⊙ t'`.
pub fn gated_query_transform(f: &[f64], t: &[f64], params: &GateParams, mode: GateMode) -> Result<Vector> {
    let e = f.len();
    if t.len() != e || params.gamma.len() != e || params.beta.len() != e {
        return Err(Error::argument(format!(
            "gate widths differ: f={e}, t={}, gamma={}, beta={}",
            t.len(),
            params.gamma.len(),
            params.beta.len()
        )));
    }
    let t_prime: Vec<f64> = (0..e).map(|i| libm::tanh(params.gamma[i] * t[i]) + params.beta[i]).collect();
    let mut g: Vec<f64> = t_prime.iter().zip(f).map(|(tp, fi)| tp * fi).collect();
    match mode {
        GateMode::Softmax => softmax_in_place(&mut g),
        GateMode::Sigmoid => g.iter_mut().for_each(|z| *z = sigmoid(*z)),
    }
    // g⊙f + (t' − g⊙t'), the same operation order as the differentiable path.
    let out = (0..e).map(|i| g[i] * f[i] + (t_prime[i] - g[i] * t_prime[i])).collect();
    Vector::from_vec(out)
}
