//! Semiparametric (local IV) MTE from a partially linear outcome model.
//!
//! `E[y | X, p] = Xβ⁰ + p·X(β¹ − β⁰) + K(p)` is fitted on the common
//! support by double residualization on `p̂`; the MTE is then
//! `x̄·(β̂¹ − β̂⁰) + K̂′(u)`.

use nalgebra::{DMatrix, DVector};

use super::local_poly::{derivative_bandwidth, rule_of_thumb_bandwidth, LocalPolySmoother};
use super::ols::ols_coefficients;
use super::probit::{probit_fit, propensity};
use super::support::{common_support, DEFAULT_BIN_WIDTH, DEFAULT_MIN_COUNT};
use super::{
    supported_grid, EstimationData, EstimationError, EstimatorKind, MteFit, PercentileEntry, Result, SelectionTerms,
    PERCENTILE_GRID,
};

/// Share of the common-support width used as the default `K̂′` bandwidth.
pub const DEFAULT_DERIVATIVE_SPAN: f64 = 0.5;

/// Bandwidth choice for `K̂′`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerivativeBandwidth {
    /// Fraction of the common-support width `p_hi − p_lo`.
    SupportFraction(f64),
    /// Plug-in rule of thumb, see [`derivative_bandwidth`].
    RuleOfThumb,
    Fixed(f64),
}

impl Default for DerivativeBandwidth {
    fn default() -> Self {
        DerivativeBandwidth::SupportFraction(DEFAULT_DERIVATIVE_SPAN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiparametricOptions {
    /// Bandwidth for residualizing `y`, `X` and `p̂X` on `p̂`; defaults to
    /// `1.06·sd(p̂)·n^(−1/5)`.
    pub residual_bandwidth: Option<f64>,
    /// The derivative is far noisier than the fitted values, most of all
    /// near the support edges, so the default smooths over half the
    /// support.
    pub derivative_bandwidth: DerivativeBandwidth,
    pub degree: usize,
    pub bin_width: f64,
    pub min_count: usize,
}

impl Default for SemiparametricOptions {
    fn default() -> Self {
        Self {
            residual_bandwidth: None,
            derivative_bandwidth: DerivativeBandwidth::default(),
            degree: 2,
            bin_width: DEFAULT_BIN_WIDTH,
            min_count: DEFAULT_MIN_COUNT,
        }
    }
}

pub fn mte_semiparametric(data: &EstimationData, options: &SemiparametricOptions) -> Result<MteFit> {
    data.check_arms()?;
    let z = data.selection_design();
    let first_stage = probit_fit(&data.treated, &z).map_err(|e| EstimationError::FirstStage(Box::new(e)))?;
    let p_all = propensity(&first_stage, &z).map_err(|e| EstimationError::FirstStage(Box::new(e)))?;

    let support = common_support(&p_all, &data.treated, options.bin_width, options.min_count)?;
    if !PERCENTILE_GRID.iter().any(|&u| support.contains(u)) {
        return Err(EstimationError::SupportTooNarrow { p_lo: support.p_lo, p_hi: support.p_hi });
    }
    let keep: Vec<usize> = (0..data.len()).filter(|&i| support.contains(p_all[i])).collect();
    let n = keep.len();
    let k = data.n_covariates();
    let p: Vec<f64> = keep.iter().map(|&i| p_all[i]).collect();

    let wrap = |e| EstimationError::OutcomeStage(Box::new(e));
    let h_res = options.residual_bandwidth.unwrap_or_else(|| rule_of_thumb_bandwidth(&p));
    let smoother = LocalPolySmoother::new(&p, h_res, options.degree).map_err(wrap)?;

    // columns: y, X_1..X_k, p·X_1..p·X_k
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(1 + 2 * k);
    columns.push(keep.iter().map(|&i| data.outcome[i]).collect());
    for j in 0..k {
        columns.push(keep.iter().map(|&i| data.covariates[(i, j)]).collect());
    }
    for j in 0..k {
        columns.push(keep.iter().zip(&p).map(|(&i, &pi)| pi * data.covariates[(i, j)]).collect());
    }
    let (beta0, delta_beta) = if k > 0 {
        let refs: Vec<&[f64]> = columns.iter().map(|c| c.as_slice()).collect();
        let resid = smoother.residualize(&refs).map_err(wrap)?;
        let ey = DVector::from_vec(resid[0].clone());
        let w = DMatrix::from_fn(n, 2 * k, |i, j| resid[1 + j][i]);
        let (b, _) = ols_coefficients(&ey, &w, "residualized outcome design").map_err(wrap)?;
        (b.rows(0, k).into_owned(), b.rows(k, k).into_owned())
    } else {
        (DVector::zeros(0), DVector::zeros(0))
    };

    // r = y − Xβ⁰ − p·XΔβ estimates K(p) up to noise
    let r: Vec<f64> = (0..n)
        .map(|i| {
            let mut v = columns[0][i];
            for j in 0..k {
                v -= columns[1 + j][i] * beta0[j] + columns[1 + k + j][i] * delta_beta[j];
            }
            v
        })
        .collect();
    let h_der = match options.derivative_bandwidth {
        DerivativeBandwidth::SupportFraction(f) => f * (support.p_hi - support.p_lo),
        DerivativeBandwidth::RuleOfThumb => derivative_bandwidth(&p, &r, options.degree).map_err(wrap)?,
        DerivativeBandwidth::Fixed(h) => h,
    };
    let k_smoother = LocalPolySmoother::new(&p, h_der, options.degree).map_err(wrap)?;
    let k_prime = supported_grid(&support)
        .into_iter()
        .map(|u| Ok((u, k_smoother.fit_at(u, &[&r])?[0].derivative)))
        .collect::<Result<Vec<_>>>()
        .map_err(wrap)?;

    let mut fit = MteFit {
        kind: EstimatorKind::Semiparametric,
        n_obs: n,
        first_stage,
        selection_names: data.selection_names(),
        beta0_hat: beta0,
        delta_intercept: None,
        delta_beta,
        selection: SelectionTerms::Semiparametric { k_prime },
        x_bar: data.covariate_means(),
        support: Some(support),
        percentiles: Vec::new(),
        ate: 0.0,
        ate_ci: None,
        first_stage_ci: None,
        curve_ci: None,
        bootstrap: None,
        bandwidths: Some((h_res, h_der)),
    };
    fit.percentiles = PERCENTILE_GRID
        .iter()
        .map(|&u| {
            let estimate = fit.mte(u).expect("grid lies inside (0, 1)");
            PercentileEntry { u, estimate, ci: None, outside_support: estimate.is_none() }
        })
        .collect();
    fit.ate = super::ate_from_mte(&fit);
    Ok(fit)
}
