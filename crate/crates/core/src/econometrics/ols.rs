//! Least squares with cluster-robust covariance.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use super::{EstimationError, Result};

/// Relative eigenvalue floor of the column-scaled Gram matrix below which a
/// design is treated as rank deficient.
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: DVector<f64>,
    /// Cluster-robust sandwich covariance with the usual
    /// `G/(G−1)·(n−1)/(n−k)` small-sample factor.
    pub covariance: DMatrix<f64>,
    pub residuals: DVector<f64>,
}

/// True when the Gram matrix `WᵀW` is numerically full rank.
pub(crate) fn gram_is_full_rank(gram: &DMatrix<f64>) -> bool {
    let k = gram.nrows();
    if k == 0 {
        return true;
    }
    let scale: Vec<f64> = (0..k).map(|j| gram[(j, j)].sqrt()).collect();
    if scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return false;
    }
    let scaled = DMatrix::from_fn(k, k, |i, j| gram[(i, j)] / (scale[i] * scale[j]));
    let eig = SymmetricEigen::new(scaled).eigenvalues;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    min > RANK_TOLERANCE * max
}

/// Solves the normal equations `WᵀW b = Wᵀy`.
pub fn ols_coefficients(y: &DVector<f64>, w: &DMatrix<f64>, what: &'static str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if y.len() != w.nrows() {
        return Err(EstimationError::DimensionMismatch { expected: w.nrows(), found: y.len() });
    }
    let gram = w.tr_mul(w);
    if w.nrows() < w.ncols() || !gram_is_full_rank(&gram) {
        return Err(EstimationError::RankDeficient(what));
    }
    let chol = Cholesky::new(gram).ok_or(EstimationError::RankDeficient(what))?;
    let beta = chol.solve(&w.tr_mul(y));
    Ok((beta, chol.inverse()))
}

/// OLS with a cluster-robust sandwich covariance. Without cluster ids every
/// observation is its own cluster (HC1).
pub fn ols(y: &DVector<f64>, w: &DMatrix<f64>, clusters: Option<&[usize]>) -> Result<OlsFit> {
    let (coefficients, bread) = ols_coefficients(y, w, "ols design")?;
    let residuals = y - w * &coefficients;
    let n = w.nrows();
    let k = w.ncols();
    let ids: Vec<usize> = match clusters {
        Some(c) => {
            if c.len() != n {
                return Err(EstimationError::DimensionMismatch { expected: n, found: c.len() });
            }
            c.to_vec()
        }
        None => (0..n).collect(),
    };
    let n_groups = ids.iter().max().map_or(0, |m| m + 1);
    let mut scores = DMatrix::<f64>::zeros(n_groups, k);
    for i in 0..n {
        let e = residuals[i];
        for j in 0..k {
            scores[(ids[i], j)] += w[(i, j)] * e;
        }
    }
    let meat = scores.tr_mul(&scores);
    let g = (0..n_groups).filter(|&gi| ids.contains(&gi)).count() as f64;
    let factor = if g > 1.0 && n > k { g / (g - 1.0) * (n as f64 - 1.0) / (n - k) as f64 } else { 1.0 };
    let covariance = &bread * meat * &bread * factor;
    Ok(OlsFit { coefficients, covariance, residuals })
}
