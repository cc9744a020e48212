//! Contrastive and matching objectives on plain matrices.

use alloc::vec::Vec;

use crate::autodiff::cross_entropy;
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Symmetric contrastive loss: the mean of the row-wise and column-wise
/// cross-entropies of `similarity` against its diagonal.
pub fn itc_loss(similarity: &Matrix) -> Result<f64> {
    let (b, c) = similarity.shape();
    if b != c || b == 0 {
        return Err(Error::Shape { op: "itc_loss", left: (b, c), right: (b, b) });
    }
    let diag: Vec<usize> = (0..b).collect();
    let rows = cross_entropy(similarity, &diag)?;
    let cols = cross_entropy(&similarity.transpose(), &diag)?;
    Ok(0.5 * (rows + cols))
}

/// Mean two-class cross-entropy of `logits` (`n × 2`) against `labels`
/// (1 = matched, 0 = mismatched); equal to binary cross-entropy on the logit
/// difference.
pub fn itm_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.cols() != 2 {
        return Err(Error::Shape { op: "itm_loss", left: logits.shape(), right: (labels.len(), 2) });
    }
    cross_entropy(logits, labels)
}

/// Fraction of rows whose largest entry sits on the diagonal (first index
/// wins ties).
pub fn recall_at_1(similarity: &Matrix) -> f64 {
    recall_at_k(similarity, 1)
}

/// Fraction of rows whose diagonal entry ranks within the top `k`.
pub fn recall_at_k(similarity: &Matrix, k: usize) -> f64 {
    let b = similarity.rows();
    if b == 0 {
        return 0.0;
    }
    let hits = (0..b)
        .filter(|&i| {
            let row = similarity.row(i);
            let target = row[i];
            // Rank = entries strictly larger, plus equal entries at lower index.
            let rank = row.iter().enumerate().filter(|&(j, &x)| x > target || (x == target && j < i)).count();
            rank < k
        })
        .count();
    hits as f64 / b as f64
}
