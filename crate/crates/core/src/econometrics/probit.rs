//! Probit maximum likelihood by Newton's method on the exact Hessian.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::ols::gram_is_full_rank;
use super::{EstimationError, Result};
use crate::stats::{norm_cdf, norm_pdf, pdf_over_cdf};

pub const GRADIENT_TOLERANCE: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 100;
/// Coefficient norm beyond which the likelihood is deemed to have no
/// finite maximizer (quasi-complete separation).
pub const SEPARATION_NORM: f64 = 1e4;
/// Relative Newton step size that still counts as converged.
const STEP_TOLERANCE: f64 = 1e-4;
/// Propensities are kept inside `[CLAMP, 1 − CLAMP]`.
pub const PROPENSITY_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ProbitFit {
    pub coefficients: DVector<f64>,
    /// Inverse of the observed information at the estimate.
    pub covariance: DMatrix<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl ProbitFit {
    pub fn standard_errors(&self) -> DVector<f64> {
        self.covariance.diagonal().map(f64::sqrt)
    }
}

/// ln Φ(z), stable in the lower tail.
fn ln_cdf(z: f64) -> f64 {
    if z > -30.0 {
        norm_cdf(z).ln()
    } else {
        -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln() - pdf_over_cdf(z).ln()
    }
}

struct Evaluation {
    log_likelihood: f64,
    gradient: DVector<f64>,
    neg_hessian: DMatrix<f64>,
}

fn evaluate(d: &[bool], z: &DMatrix<f64>, beta: &DVector<f64>, with_hessian: bool) -> Evaluation {
    let index = z * beta;
    let n = z.nrows();
    let mut ll = 0.0;
    let mut resid = DVector::zeros(n);
    let mut weight = DVector::zeros(n);
    for i in 0..n {
        let xb = index[i];
        // signed generalized residual; dλ/dz = −λ(λ + z) in both branches
        let (l, lam) = if d[i] { (ln_cdf(xb), pdf_over_cdf(xb)) } else { (ln_cdf(-xb), -pdf_over_cdf(-xb)) };
        ll += l;
        resid[i] = lam;
        weight[i] = lam * (lam + xb);
    }
    let gradient = z.tr_mul(&resid);
    let neg_hessian = if with_hessian {
        let mut weighted = z.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= weight[i];
        }
        z.tr_mul(&weighted)
    } else {
        DMatrix::zeros(0, 0)
    };
    Evaluation { log_likelihood: ll, gradient, neg_hessian }
}

/// Log-likelihood of a probit model at `beta`.
pub fn probit_log_likelihood(d: &[bool], z: &DMatrix<f64>, beta: &DVector<f64>) -> f64 {
    evaluate(d, z, beta, false).log_likelihood
}

/// Maximum-likelihood probit of `d` on the design `z` (which should carry
/// its own intercept column).
pub fn probit_fit(d: &[bool], z: &DMatrix<f64>) -> Result<ProbitFit> {
    let n = z.nrows();
    let k = z.ncols();
    if d.len() != n {
        return Err(EstimationError::DimensionMismatch { expected: n, found: d.len() });
    }
    let n_treated = d.iter().filter(|&&x| x).count();
    if n_treated == 0 || n_treated == n {
        return Err(EstimationError::SingleClass);
    }
    if n < k || !gram_is_full_rank(&z.tr_mul(z)) {
        return Err(EstimationError::RankDeficient("probit design"));
    }

    let mut beta = DVector::zeros(k);
    let mut eval = evaluate(d, z, &beta, true);
    let mut iterations = 0;
    let mut converged = eval.gradient.norm() < GRADIENT_TOLERANCE;
    while !converged && iterations < MAX_ITERATIONS {
        iterations += 1;
        let chol = Cholesky::new(eval.neg_hessian.clone()).ok_or(EstimationError::Separation)?;
        let step = chol.solve(&eval.gradient);
        // step halving keeps each iterate an ascent step
        let mut t = 1.0;
        let mut candidate = &beta + &step;
        let mut next = evaluate(d, z, &candidate, true);
        while !(next.log_likelihood >= eval.log_likelihood - 1e-12 * eval.log_likelihood.abs()) && t > 1e-8 {
            t *= 0.5;
            candidate = &beta + &step * t;
            next = evaluate(d, z, &candidate, true);
        }
        beta = candidate;
        eval = next;
        if beta.norm() > SEPARATION_NORM || !beta.iter().all(|b| b.is_finite()) {
            return Err(EstimationError::Separation);
        }
        converged = eval.gradient.norm() < GRADIENT_TOLERANCE;
    }
    let chol = Cholesky::new(eval.neg_hessian.clone()).ok_or(EstimationError::Separation)?;
    // Under separation the gradient decays geometrically while Newton keeps
    // proposing O(1) steps along the divergent direction.
    if chol.solve(&eval.gradient).norm() > STEP_TOLERANCE * (1.0 + beta.norm()) {
        return Err(EstimationError::Separation);
    }
    let covariance = chol.inverse();
    Ok(ProbitFit {
        coefficients: beta,
        covariance,
        log_likelihood: eval.log_likelihood,
        converged,
        iterations,
        gradient_norm: eval.gradient.norm(),
    })
}

/// `Φ(Zψ̂)` clamped to `[1e-6, 1 − 1e-6]`.
pub fn propensity(fit: &ProbitFit, z: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !fit.converged {
        return Err(EstimationError::NotConverged);
    }
    if z.ncols() != fit.coefficients.len() {
        return Err(EstimationError::DimensionMismatch { expected: fit.coefficients.len(), found: z.ncols() });
    }
    Ok((z * &fit.coefficients)
        .iter()
        .map(|&xb| norm_cdf(xb).clamp(PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP))
        .collect())
}

/// Probit score `Σ zᵢ (dᵢ − Φᵢ) φᵢ / (Φᵢ(1 − Φᵢ))` written out directly.
pub fn probit_score(d: &[bool], z: &DMatrix<f64>, beta: &DVector<f64>) -> DVector<f64> {
    let index = z * beta;
    let mut score = DVector::zeros(z.ncols());
    for i in 0..z.nrows() {
        let cdf = norm_cdf(index[i]);
        let w = (if d[i] { 1.0 } else { 0.0 } - cdf) * norm_pdf(index[i]) / (cdf * (1.0 - cdf));
        score += z.row(i).transpose() * w;
    }
    score
}
