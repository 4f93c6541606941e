//! Parametric-normal MTE via two-arm switching regressions with inverse
//! Mills ratio control functions.

use nalgebra::{DMatrix, DVector};

use super::ols::ols;
use super::probit::{probit_fit, propensity};
use super::support::{common_support, DEFAULT_BIN_WIDTH, DEFAULT_MIN_COUNT};
use super::{
    EstimationData, EstimationError, EstimatorKind, MteFit, PercentileEntry, Result, SelectionTerms, PERCENTILE_GRID,
};
use crate::stats::{norm_pdf, norm_quantile};

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(EstimationError::BoundaryProbability(p))
    }
}

/// `E[V | V < Φ⁻¹(p)] = −φ(Φ⁻¹(p))/p`.
pub fn mills_treated(p: f64) -> Result<f64> {
    check_probability(p)?;
    Ok(-norm_pdf(norm_quantile(p)) / p)
}

/// `E[V | V > Φ⁻¹(p)] = φ(Φ⁻¹(p))/(1 − p)`.
pub fn mills_untreated(p: f64) -> Result<f64> {
    check_probability(p)?;
    Ok(norm_pdf(norm_quantile(p)) / (1.0 - p))
}

struct ArmFit {
    intercept: f64,
    slopes: DVector<f64>,
    sigma_v: f64,
}

fn fit_arm(data: &EstimationData, p: &[f64], arm: bool) -> Result<ArmFit> {
    let rows: Vec<usize> = (0..data.len()).filter(|&i| data.treated[i] == arm).collect();
    let k = data.n_covariates();
    let mut w = DMatrix::zeros(rows.len(), k + 2);
    let mut y = DVector::zeros(rows.len());
    let mut clusters = Vec::with_capacity(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        w[(r, 0)] = 1.0;
        for j in 0..k {
            w[(r, 1 + j)] = data.covariates[(i, j)];
        }
        w[(r, k + 1)] = if arm { mills_treated(p[i])? } else { mills_untreated(p[i])? };
        y[r] = data.outcome[i];
        clusters.push(data.clusters[i]);
    }
    let fit = ols(&y, &w, Some(&clusters)).map_err(|e| match e {
        EstimationError::RankDeficient(_) => EstimationError::RankDeficient(if arm {
            "treated-arm outcome design (mills term collinear)"
        } else {
            "untreated-arm outcome design (mills term collinear)"
        }),
        other => other,
    })?;
    let b = fit.coefficients;
    Ok(ArmFit { intercept: b[0], slopes: b.rows(1, k).into_owned(), sigma_v: b[k + 1] })
}

/// Parametric-normal estimator: probit of `D` on `[1, Z, X]`, then OLS of
/// `y` on `[1, X, mills]` separately in each arm. The mills coefficients
/// estimate `σ₁V` and `σ₀V`, and
/// `MTE(x̄, u) = Δα̂ + x̄·Δβ̂ + (σ̂₁V − σ̂₀V)·Φ⁻¹(u)`.
pub fn mte_parametric(data: &EstimationData) -> Result<MteFit> {
    data.check_arms()?;
    let z = data.selection_design();
    let first_stage = probit_fit(&data.treated, &z).map_err(|e| EstimationError::FirstStage(Box::new(e)))?;
    let p = propensity(&first_stage, &z).map_err(|e| EstimationError::FirstStage(Box::new(e)))?;

    let wrap = |e| EstimationError::OutcomeStage(Box::new(e));
    let treated = fit_arm(data, &p, true).map_err(wrap)?;
    let untreated = fit_arm(data, &p, false).map_err(wrap)?;

    let k = data.n_covariates();
    let mut beta0_hat = DVector::zeros(k + 1);
    beta0_hat[0] = untreated.intercept;
    beta0_hat.rows_mut(1, k).copy_from(&untreated.slopes);

    let support = common_support(&p, &data.treated, DEFAULT_BIN_WIDTH, DEFAULT_MIN_COUNT).ok();
    let mut fit = MteFit {
        kind: EstimatorKind::ParametricNormal,
        n_obs: data.len(),
        first_stage,
        selection_names: data.selection_names(),
        beta0_hat,
        delta_intercept: Some(treated.intercept - untreated.intercept),
        delta_beta: &treated.slopes - &untreated.slopes,
        selection: SelectionTerms::Normal { sigma1v: treated.sigma_v, sigma0v: untreated.sigma_v },
        x_bar: data.covariate_means(),
        support,
        percentiles: Vec::new(),
        ate: 0.0,
        ate_ci: None,
        first_stage_ci: None,
        curve_ci: None,
        bootstrap: None,
        bandwidths: None,
    };
    fit.percentiles = PERCENTILE_GRID
        .iter()
        .map(|&u| PercentileEntry {
            u,
            estimate: fit.mte(u).expect("grid lies inside (0, 1)"),
            ci: None,
            outside_support: fit.support.as_ref().is_none_or(|s| !s.contains(u)),
        })
        .collect();
    fit.ate = fit.observed_gap();
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::roy_sample;
    use super::super::ate_from_mte;
    use super::*;

    #[test]
    fn mills_values() {
        assert!((mills_treated(0.5).unwrap() + 0.797_884_560_802_865_4).abs() < 1e-12);
        assert!((mills_untreated(0.5).unwrap() - 0.797_884_560_802_865_4).abs() < 1e-12);
        assert!(mills_treated(1.0 - 1e-9).unwrap().abs() < 1e-7);
        assert!(matches!(mills_treated(0.0), Err(EstimationError::BoundaryProbability(_))));
        assert!(matches!(mills_untreated(1.0), Err(EstimationError::BoundaryProbability(_))));
    }

    #[test]
    fn mills_identity_on_dense_grid() {
        for i in 1..10_000 {
            let p = i as f64 / 10_000.0;
            let s = p * mills_treated(p).unwrap() + (1.0 - p) * mills_untreated(p).unwrap();
            assert!(s.abs() < 1e-12, "p={p} sum={s}");
        }
    }

    #[test]
    fn recovers_selection_parameters() {
        let data = roy_sample(20_000, 11, 0.35, 0.3, -0.5);
        let fit = mte_parametric(&data).unwrap();
        assert!((fit.cov_gap().unwrap() + 0.8).abs() < 0.1, "{:?}", fit.selection);
        assert!((fit.delta_intercept.unwrap() - 0.35).abs() < 0.1);
        assert!(fit.first_stage.converged);
    }

    #[test]
    fn table_is_affine_in_normal_quantile() {
        let data = roy_sample(3_000, 3, 0.2, 0.1, -0.4);
        let fit = mte_parametric(&data).unwrap();
        let pts: Vec<(f64, f64)> =
            fit.percentiles.iter().map(|e| (norm_quantile(e.u), e.estimate.unwrap())).collect();
        let slope = (pts[6].1 - pts[0].1) / (pts[6].0 - pts[0].0);
        for &(q, m) in &pts {
            assert!((pts[0].1 + slope * (q - pts[0].0) - m).abs() < 1e-10);
        }
        assert!((slope - fit.cov_gap().unwrap()).abs() < 1e-10);
        assert!((fit.ate - fit.mte(0.5).unwrap().unwrap()).abs() < 1e-10);
        assert_eq!(fit.ate, ate_from_mte(&fit));
    }

    #[test]
    fn label_swap_negates_mirrored_curve() {
        let data = roy_sample(4_000, 5, 0.3, 0.2, -0.3);
        let fit = mte_parametric(&data).unwrap();
        let swapped = mte_parametric(&data.with_swapped_treatment()).unwrap();
        for &u in &[0.01, 0.1, 0.25, 0.5, 0.8, 0.99] {
            let a = fit.mte(u).unwrap().unwrap();
            let b = swapped.mte(1.0 - u).unwrap().unwrap();
            assert!((a + b).abs() < 1e-8, "u={u}: {a} vs {b}");
        }
    }

    #[test]
    fn translation_shifts_intercept_only() {
        let data = roy_sample(3_000, 9, 0.3, 0.2, -0.3);
        let fit = mte_parametric(&data).unwrap();
        let mut shifted = data.clone();
        shifted.outcome.add_scalar_mut(5.0);
        let fit2 = mte_parametric(&shifted).unwrap();
        assert!((fit2.beta0_hat[0] - fit.beta0_hat[0] - 5.0).abs() < 1e-10);
        assert!((fit2.beta0_hat.rows(1, 2) - fit.beta0_hat.rows(1, 2)).amax() < 1e-10);
        for &u in &[0.1, 0.5, 0.9] {
            assert!((fit2.mte(u).unwrap().unwrap() - fit.mte(u).unwrap().unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_arm_and_weak_instrument() {
        let mut data = roy_sample(500, 1, 0.3, 0.2, -0.3);
        data.treated = vec![true; 500];
        assert!(matches!(mte_parametric(&data), Err(EstimationError::EmptyArm)));
        assert!(matches!(mte_parametric(&data).unwrap_err(), EstimationError::EmptyArm));
        assert!(mte_parametric(&roy_sample(500, 1, 0.3, 0.2, -0.3)).is_ok());
        // without instruments or covariates the mills term is constant and
        // collinear with the intercept
        let mut weak = roy_sample(500, 1, 0.3, 0.2, -0.3);
        weak.instruments = DMatrix::zeros(500, 0);
        weak.instrument_names.clear();
        weak.covariates = DMatrix::zeros(500, 0);
        weak.covariate_names.clear();
        assert!(matches!(mte_parametric(&weak), Err(EstimationError::OutcomeStage(_))));
    }
}
