//! Minimal dense symmetric-positive-definite helpers: Cholesky factorization,
//! triangular solves, and the log-determinant. Enough for QDA covariances and
//! small normal-equation systems; no external LAPACK.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Cholesky {
    l: Array2<f64>,
}

impl Cholesky {
    /// Factors `a = L L^T`. Fails if `a` is not positive definite.
    pub fn decompose(a: ArrayView2<'_, f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "cholesky needs a square matrix, got {}x{}",
                n,
                a.ncols()
            )));
        }
        // Pivots below this are roundoff residue of a rank-deficient matrix,
        // not genuine positive definiteness.
        let max_diag = (0..n).map(|i| a[(i, i)].abs()).fold(0.0f64, f64::max);
        let pivot_floor = f64::EPSILON * n as f64 * max_diag;
        let mut l = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[(i, j)];
                for k in 0..j {
                    sum -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if sum <= pivot_floor || !sum.is_finite() {
                        return Err(Error::Numerical(format!(
                            "matrix not positive definite (pivot {sum:.3e} at row {i})"
                        )));
                    }
                    l[(i, j)] = sum.sqrt();
                } else {
                    l[(i, j)] = sum / l[(j, j)];
                }
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `A x = b` via the factor.
    pub fn solve(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        // forward: L y = b
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let mut sum = b[i];
            for k in 0..i {
                sum -= self.l[(i, k)] * y[k];
            }
            y[i] = sum / self.l[(i, i)];
        }
        // backward: L^T x = y
        let mut x = Array1::zeros(n);
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum -= self.l[(k, i)] * x[k];
            }
            x[i] = sum / self.l[(i, i)];
        }
        x
    }

    /// log(det(A)) = 2 * sum(log(diag(L)))
    pub fn log_det(&self) -> f64 {
        (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    /// Squared Mahalanobis form `v^T A^{-1} v`.
    pub fn quad_form_inv(&self, v: ArrayView1<'_, f64>) -> f64 {
        // Solve L y = v, then the form is |y|^2.
        let n = self.dim();
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let mut sum = v[i];
            for k in 0..i {
                sum -= self.l[(i, k)] * y[k];
            }
            y[i] = sum / self.l[(i, i)];
        }
        y.iter().map(|t| t * t).sum()
    }
}
