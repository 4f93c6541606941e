//! Roy-model estimation: probit propensity scores, parametric-normal and
//! semiparametric marginal treatment effects, common support and cluster
//! bootstrap inference.
//!
//! Outcome equations are `yʲ = αʲ + Xβʲ + ωʲ` for `j ∈ {0, 1}` and selection
//! is `D = 1{Zψ − V > 0}` with `V ~ N(0, 1)`. Writing `U_D = Φ(V)`, the
//! marginal treatment effect is `MTE(x, u) = E[y¹ − y⁰ | X = x, U_D = u]`;
//! low `u` marks the agents most prone to take the treatment.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub mod bootstrap;
pub mod local_poly;
pub mod ols;
pub mod parametric;
pub mod probit;
pub mod semiparametric;
pub mod support;

pub use bootstrap::{bootstrap_mte, cluster_bootstrap, BootstrapResult, DEFAULT_REPS};
pub use local_poly::{derivative_bandwidth, local_polynomial, rule_of_thumb_bandwidth, LocalFit, LocalPolySmoother};
pub use ols::{ols, OlsFit};
pub use parametric::{mills_treated, mills_untreated, mte_parametric};
pub use probit::{probit_fit, probit_log_likelihood, probit_score, propensity, ProbitFit};
pub use semiparametric::{mte_semiparametric, DerivativeBandwidth, SemiparametricOptions};
pub use support::{common_support, SupportBin, SupportRegion};

use crate::stats::norm_quantile;

/// Quantiles of `U_D` at which fits are tabulated.
pub const PERCENTILE_GRID: [f64; 7] = [0.01, 0.10, 0.25, 0.50, 0.75, 0.90, 0.99];

/// Step of the `u` grid used for curves and the semiparametric ATE.
pub const CURVE_STEP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimationError {
    #[error("treatment indicator has a single class")]
    SingleClass,
    #[error("a treatment arm is empty")]
    EmptyArm,
    #[error("{0} is rank deficient")]
    RankDeficient(&'static str),
    #[error("probit coefficients diverge (quasi-complete separation)")]
    Separation,
    #[error("probit did not converge")]
    NotConverged,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("bin width must lie in (0, 1], got {0}")]
    InvalidBinWidth(f64),
    #[error("{points} points with positive kernel weight, need {needed}")]
    InsufficientLocalData { points: usize, needed: usize },
    #[error("local polynomial design is singular")]
    SingularLocalDesign,
    #[error("probability {0} outside (0, 1)")]
    BoundaryProbability(f64),
    #[error("quantile {0} outside (0, 1)")]
    QuantileOutOfRange(f64),
    #[error("no common support between treatment arms")]
    EmptySupport,
    #[error("common support [{p_lo}, {p_hi}] contains none of the tabulated percentiles")]
    SupportTooNarrow { p_lo: f64, p_hi: f64 },
    #[error("bootstrap needs at least two clusters")]
    TooFewClusters,
    #[error("{failed} of {reps} bootstrap replicates failed")]
    TooManyFailures { failed: usize, reps: usize },
    #[error("first stage: {0}")]
    FirstStage(Box<EstimationError>),
    #[error("outcome stage: {0}")]
    OutcomeStage(Box<EstimationError>),
}

pub type Result<T> = std::result::Result<T, EstimationError>;

/// Estimation sample: outcome, binary treatment, covariates (without an
/// intercept column), excluded instruments and cluster labels.
#[derive(Debug, Clone)]
pub struct EstimationData {
    pub outcome: DVector<f64>,
    pub treated: Vec<bool>,
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub instruments: DMatrix<f64>,
    pub instrument_names: Vec<String>,
    pub clusters: Vec<usize>,
}

impl EstimationData {
    pub fn new(
        outcome: DVector<f64>,
        treated: Vec<bool>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
        instruments: DMatrix<f64>,
        instrument_names: Vec<String>,
        clusters: Vec<usize>,
    ) -> Result<Self> {
        let n = outcome.len();
        for found in [treated.len(), covariates.nrows(), instruments.nrows(), clusters.len()] {
            if found != n {
                return Err(EstimationError::DimensionMismatch { expected: n, found });
            }
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(EstimationError::DimensionMismatch { expected: covariates.ncols(), found: covariate_names.len() });
        }
        if instrument_names.len() != instruments.ncols() {
            return Err(EstimationError::DimensionMismatch { expected: instruments.ncols(), found: instrument_names.len() });
        }
        if !outcome.iter().all(|v| v.is_finite()) {
            return Err(EstimationError::NonFinite("outcome"));
        }
        if !covariates.iter().all(|v| v.is_finite()) {
            return Err(EstimationError::NonFinite("covariates"));
        }
        if !instruments.iter().all(|v| v.is_finite()) {
            return Err(EstimationError::NonFinite("instruments"));
        }
        Ok(Self { outcome, treated, covariates, covariate_names, instruments, instrument_names, clusters })
    }

    pub fn len(&self) -> usize {
        self.outcome.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcome.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    /// Rows `indices` (repeats allowed) relabelled with `clusters`.
    pub fn subset(&self, indices: &[usize], clusters: Vec<usize>) -> Self {
        let pick_rows = |m: &DMatrix<f64>| DMatrix::from_fn(indices.len(), m.ncols(), |i, j| m[(indices[i], j)]);
        Self {
            outcome: DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.outcome[i])),
            treated: indices.iter().map(|&i| self.treated[i]).collect(),
            covariates: pick_rows(&self.covariates),
            covariate_names: self.covariate_names.clone(),
            instruments: pick_rows(&self.instruments),
            instrument_names: self.instrument_names.clone(),
            clusters,
        }
    }

    /// Same sample with `D ← 1 − D`.
    pub fn with_swapped_treatment(&self) -> Self {
        Self { treated: self.treated.iter().map(|d| !d).collect(), ..self.clone() }
    }

    /// Probit design `[1, Z, X]`.
    pub fn selection_design(&self) -> DMatrix<f64> {
        let m = self.instruments.ncols();
        let k = self.covariates.ncols();
        DMatrix::from_fn(self.len(), 1 + m + k, |i, j| {
            if j == 0 {
                1.0
            } else if j <= m {
                self.instruments[(i, j - 1)]
            } else {
                self.covariates[(i, j - 1 - m)]
            }
        })
    }

    pub fn selection_names(&self) -> Vec<String> {
        std::iter::once("intercept".to_string())
            .chain(self.instrument_names.iter().cloned())
            .chain(self.covariate_names.iter().cloned())
            .collect()
    }

    pub fn covariate_means(&self) -> DVector<f64> {
        let n = self.len() as f64;
        DVector::from_iterator(self.n_covariates(), self.covariates.column_iter().map(|c| c.sum() / n))
    }

    pub(crate) fn check_arms(&self) -> Result<()> {
        let treated = self.treated.iter().filter(|&&d| d).count();
        if treated == 0 || treated == self.len() {
            return Err(EstimationError::EmptyArm);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    ParametricNormal,
    Semiparametric,
}

impl EstimatorKind {
    pub fn code(self) -> &'static str {
        match self {
            EstimatorKind::ParametricNormal => "normal",
            EstimatorKind::Semiparametric => "semipar",
        }
    }
}

/// Estimated selection component of the MTE.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectionTerms {
    /// Mills-term coefficients of the treated and untreated arms.
    Normal { sigma1v: f64, sigma0v: f64 },
    /// `K′(u)` on the `u = k/100` points inside the support.
    Semiparametric { k_prime: Vec<(f64, f64)> },
}

/// Percentile-table entry. `estimate` is absent when the quantile lies
/// outside the common support of a semiparametric fit.
#[derive(Debug, Clone, PartialEq)]
pub struct PercentileEntry {
    pub u: f64,
    pub estimate: Option<f64>,
    pub ci: Option<(f64, f64)>,
    /// Set when `u` lies outside the common support.
    pub outside_support: bool,
}

/// Bootstrap bookkeeping attached to a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapSummary {
    pub reps: usize,
    pub failures: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct MteFit {
    pub kind: EstimatorKind,
    pub n_obs: usize,
    pub first_stage: ProbitFit,
    pub selection_names: Vec<String>,
    /// Outcome coefficients of the untreated arm; for the parametric kind the
    /// first entry is the intercept.
    pub beta0_hat: DVector<f64>,
    /// Intercept gap `α¹ − α⁰`; not separately identified by the
    /// semiparametric estimator, where it is part of `K′`.
    pub delta_intercept: Option<f64>,
    /// Covariate slope gap `β¹ − β⁰`.
    pub delta_beta: DVector<f64>,
    pub selection: SelectionTerms,
    pub x_bar: DVector<f64>,
    pub support: Option<SupportRegion>,
    pub percentiles: Vec<PercentileEntry>,
    pub ate: f64,
    pub ate_ci: Option<(f64, f64)>,
    /// Bootstrap CIs of the first-stage coefficients, aligned with
    /// `selection_names`.
    pub first_stage_ci: Option<Vec<Option<(f64, f64)>>>,
    /// CIs on the `u = k/100` curve grid, `k = 1..=99`.
    pub curve_ci: Option<Vec<Option<(f64, f64)>>>,
    pub bootstrap: Option<BootstrapSummary>,
    /// Bandwidths used for residualization and for `K′`.
    pub bandwidths: Option<(f64, f64)>,
}

impl MteFit {
    /// `x̄·Δβ̂ + Δα̂` (the latter only when identified).
    pub fn observed_gap(&self) -> f64 {
        self.x_bar.dot(&self.delta_beta) + self.delta_intercept.unwrap_or(0.0)
    }

    /// Estimated `σ₁V − σ₀V` for the parametric kind.
    pub fn cov_gap(&self) -> Option<f64> {
        match self.selection {
            SelectionTerms::Normal { sigma1v, sigma0v } => Some(sigma1v - sigma0v),
            SelectionTerms::Semiparametric { .. } => None,
        }
    }

    /// MTE at `x̄` and quantile `u`. Semiparametric values are absent
    /// outside the support and linearly interpolated between grid points.
    pub fn mte(&self, u: f64) -> Result<Option<f64>> {
        if !(u > 0.0 && u < 1.0) {
            return Err(EstimationError::QuantileOutOfRange(u));
        }
        match &self.selection {
            SelectionTerms::Normal { sigma1v, sigma0v } => {
                Ok(Some(self.observed_gap() + (sigma1v - sigma0v) * norm_quantile(u)))
            }
            SelectionTerms::Semiparametric { k_prime } => {
                Ok(interpolate_grid(k_prime, u).map(|k| self.observed_gap() + k))
            }
        }
    }

    /// MTE on `u = k/100`, `k = 1..=99`.
    pub fn curve(&self) -> Vec<(f64, Option<f64>)> {
        curve_grid().map(|u| (u, self.mte(u).expect("grid lies inside (0, 1)"))).collect()
    }
}

/// `u = k/100` for `k = 1..=99`.
pub fn curve_grid() -> impl Iterator<Item = f64> {
    (1..=99).map(|k| k as f64 * CURVE_STEP)
}

fn interpolate_grid(grid: &[(f64, f64)], u: f64) -> Option<f64> {
    const EPS: f64 = 1e-9;
    let first = grid.first()?;
    let last = grid.last()?;
    if u < first.0 - EPS || u > last.0 + EPS {
        return None;
    }
    let idx = grid.partition_point(|&(g, _)| g < u - EPS);
    let (g1, v1) = grid[idx.min(grid.len() - 1)];
    if (g1 - u).abs() <= EPS || idx == 0 {
        return Some(v1);
    }
    let (g0, v0) = grid[idx - 1];
    Some(v0 + (v1 - v0) * (u - g0) / (g1 - g0))
}

/// Average treatment effect implied by a fit: `x̄·Δ̂` for the parametric
/// kind, the mean MTE over the supported curve grid otherwise. Equals
/// `fit.ate`.
pub fn ate_from_mte(fit: &MteFit) -> f64 {
    match &fit.selection {
        SelectionTerms::Normal { .. } => fit.observed_gap(),
        SelectionTerms::Semiparametric { k_prime } => {
            fit.observed_gap() + k_prime.iter().map(|&(_, k)| k).sum::<f64>() / k_prime.len() as f64
        }
    }
}

/// Curve-grid points inside `[p_lo, p_hi]`, widened by a hair so that bin
/// edges landing exactly on `k/100` are included.
pub(crate) fn supported_grid(support: &SupportRegion) -> Vec<f64> {
    curve_grid().filter(|&u| u >= support.p_lo - 1e-9 && u <= support.p_hi + 1e-9).collect()
}
