//! Base probabilistic classifiers: k-nearest neighbors and regularized
//! quadratic discriminant analysis. Both expose `fit` / `predict_proba`
//! returning P(MDD), the contract the stacking layer consumes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::stats::sigmoid;

fn check_training_input(x: &ArrayView2<'_, f64>, y: &[bool]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows but {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("training matrix contains non-finite values".into()));
    }
    let pos = y.iter().filter(|&&b| b).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::Invalid(
            "training labels contain a single class; need both MDD and NC".into(),
        ));
    }
    Ok(())
}

/// k-nearest-neighbor vote classifier with Euclidean distance.
///
/// The predicted probability is the MDD fraction among the k nearest
/// neighbors. Neighbor selection sorts on (distance, training-row index), so
/// exact distance ties resolve to the lower row index and predictions are
/// deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    x: Array2<f64>,
    y: Vec<bool>,
    k: usize,
}

impl KnnModel {
    pub fn fit(x: ArrayView2<'_, f64>, y: &[bool], k: usize) -> Result<Self> {
        check_training_input(&x, y)?;
        if k == 0 {
            return Err(Error::Invalid("kNN requires k >= 1".into()));
        }
        if k > x.nrows() {
            return Err(Error::Invalid(format!(
                "k = {k} exceeds the {} training rows",
                x.nrows()
            )));
        }
        Ok(KnnModel {
            x: x.to_owned(),
            y: y.to_vec(),
            k,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn predict_proba(&self, q: ArrayView1<'_, f64>) -> Result<f64> {
        if q.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "query has {} features, model expects {}",
                q.len(),
                self.dim()
            )));
        }
        let mut dist: Vec<(f64, usize)> = self
            .x
            .axis_iter(Axis(0))
            .enumerate()
            .map(|(i, row)| {
                let d2: f64 = row
                    .iter()
                    .zip(q.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d2, i)
            })
            .collect();
        dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let votes = dist[..self.k].iter().filter(|(_, i)| self.y[*i]).count();
        Ok(votes as f64 / self.k as f64)
    }

    pub fn predict_proba_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        x.axis_iter(Axis(0)).map(|q| self.predict_proba(q)).collect()
    }
}

/// Per-class statistics cached by [`QdaModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassStats {
    mean: Array1<f64>,
    chol: Cholesky,
    log_det: f64,
    log_prior: f64,
}

/// Quadratic discriminant analysis with shrinkage toward a scaled identity:
/// `Sigma_c = (1 - lambda) * S_c + lambda * (trace(S_c)/d) * I`, where `S_c`
/// is the class sample covariance (n_c - 1 denominator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QdaModel {
    mdd: ClassStats,
    nc: ClassStats,
    shrinkage: f64,
}

impl QdaModel {
    pub fn fit(x: ArrayView2<'_, f64>, y: &[bool], shrinkage: f64) -> Result<Self> {
        check_training_input(&x, y)?;
        if !(0.0..=1.0).contains(&shrinkage) {
            return Err(Error::Invalid(format!(
                "shrinkage must lie in [0, 1], got {shrinkage}"
            )));
        }
        let n = x.nrows() as f64;
        let fit_class = |positive: bool| -> Result<ClassStats> {
            let rows: Vec<usize> = y
                .iter()
                .enumerate()
                .filter(|(_, &b)| b == positive)
                .map(|(i, _)| i)
                .collect();
            if rows.len() < 2 {
                return Err(Error::Invalid(format!(
                    "class {} has {} row(s); QDA needs at least 2 per class",
                    if positive { "MDD" } else { "NC" },
                    rows.len()
                )));
            }
            let xc = x.select(Axis(0), &rows);
            let nc = rows.len() as f64;
            let mean = xc.sum_axis(Axis(0)) / nc;
            let d = x.ncols();
            let mut cov = Array2::<f64>::zeros((d, d));
            for row in xc.axis_iter(Axis(0)) {
                for i in 0..d {
                    let di = row[i] - mean[i];
                    for j in 0..=i {
                        cov[(i, j)] += di * (row[j] - mean[j]);
                    }
                }
            }
            for i in 0..d {
                for j in 0..=i {
                    cov[(i, j)] /= nc - 1.0;
                    cov[(j, i)] = cov[(i, j)];
                }
            }
            let trace_over_d = (0..d).map(|i| cov[(i, i)]).sum::<f64>() / d as f64;
            let mut sigma = cov * (1.0 - shrinkage);
            for i in 0..d {
                sigma[(i, i)] += shrinkage * trace_over_d;
            }
            let chol = Cholesky::decompose(sigma.view()).map_err(|_| {
                Error::Numerical(format!(
                    "class covariance is singular at shrinkage {shrinkage}; \
                     increase the shrinkage parameter"
                ))
            })?;
            let log_det = chol.log_det();
            Ok(ClassStats {
                mean,
                chol,
                log_det,
                log_prior: (nc / n).ln(),
            })
        };
        Ok(QdaModel {
            mdd: fit_class(true)?,
            nc: fit_class(false)?,
            shrinkage,
        })
    }

    pub fn dim(&self) -> usize {
        self.mdd.mean.len()
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    /// Class score `log pi_c - log|Sigma_c|/2 - (q - mu)^T Sigma^-1 (q - mu)/2`.
    fn score(&self, stats: &ClassStats, q: ArrayView1<'_, f64>) -> f64 {
        let diff = &q.to_owned() - &stats.mean;
        stats.log_prior - 0.5 * stats.log_det - 0.5 * stats.chol.quad_form_inv(diff.view())
    }

    pub fn predict_proba(&self, q: ArrayView1<'_, f64>) -> Result<f64> {
        if q.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "query has {} features, model expects {}",
                q.len(),
                self.dim()
            )));
        }
        // softmax over the two scores = sigmoid of their difference
        Ok(sigmoid(self.score(&self.mdd, q) - self.score(&self.nc, q)))
    }

    pub fn predict_proba_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        x.axis_iter(Axis(0)).map(|q| self.predict_proba(q)).collect()
    }
}
