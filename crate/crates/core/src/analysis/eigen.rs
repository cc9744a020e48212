//! Cyclic Jacobi eigenvalues of small symmetric matrices.

use alloc::format;
use alloc::vec::Vec;

use crate::tensor::Matrix;
use crate::{Error, Result};

/// Off-diagonal Frobenius norm, relative to the full norm, at which the
/// iteration stops.
pub const DEFAULT_TOLERANCE: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

fn off_diagonal(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    libm::sqrt(s)
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(a: &Matrix, tolerance: f64) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape { op: "eigenvalues", left: a.shape(), right: (n, n) });
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("eigenvalue input".into()));
    }
    let mut m = a.clone();
    let scale = libm::sqrt(m.sum_squares()).max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        if off_diagonal(&m) <= tolerance * scale {
            let mut values: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
            values.sort_by(f64::total_cmp);
            return Ok(values);
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    Err(Error::argument(format!("Jacobi iteration did not converge in {MAX_SWEEPS} sweeps")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn diagonal_and_two_by_two() {
        let d = Matrix::from_rows(&[&[4.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(symmetric_eigenvalues(&d, 1e-12).unwrap(), [1.0, 4.0]);
        // [[2, 1], [1, 2]] has eigenvalues 1 and 3.
        let a = Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap();
        let e = symmetric_eigenvalues(&a, 1e-12).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn trace_and_frobenius_are_preserved() {
        let mut rng = SeededRng::new(5, 0);
        for n in [1, 3, 7, 20] {
            let b = Matrix::from_fn(n, n, |_, _| rng.normal());
            let a = b.add(&b.transpose()).unwrap();
            let e = symmetric_eigenvalues(&a, DEFAULT_TOLERANCE).unwrap();
            let trace: f64 = (0..n).map(|i| a[(i, i)]).sum();
            assert!((e.iter().sum::<f64>() - trace).abs() < 1e-9);
            assert!((e.iter().map(|x| x * x).sum::<f64>() - a.sum_squares()).abs() < 1e-8 * a.sum_squares());
            assert!(e.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn rejects_non_square() {
        assert!(symmetric_eigenvalues(&Matrix::zeros(2, 3), 1e-10).is_err());
    }
}
