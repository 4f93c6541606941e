//! Cluster bootstrap with percentile confidence intervals.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{curve_grid, BootstrapSummary, EstimationData, EstimationError, MteFit, Result};
use crate::stats::percentile_sorted;

pub const DEFAULT_REPS: usize = 50;
const LOWER: f64 = 0.025;
const UPPER: f64 = 0.975;

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub reps: usize,
    pub failures: usize,
    /// Statistics of the successful replicates, in replicate order.
    pub estimates: Vec<Vec<Option<f64>>>,
    /// 2.5/97.5 percentile bounds per statistic; absent when no successful
    /// replicate produced the statistic.
    pub intervals: Vec<Option<(f64, f64)>>,
}

/// Resamples whole clusters with replacement, reruns `statistic` on each
/// replicate and forms percentile intervals. Replicate `r` draws from a
/// generator seeded with `seed + r`. Failed replicates are excluded and
/// counted; more than half failing is an error.
pub fn cluster_bootstrap<F>(data: &EstimationData, reps: usize, seed: u64, statistic: F) -> Result<BootstrapResult>
where
    F: Fn(&EstimationData) -> Result<Vec<Option<f64>>> + Sync,
{
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in data.clusters.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    if groups.len() < 2 {
        return Err(EstimationError::TooFewClusters);
    }
    let outcomes: Vec<Result<Vec<Option<f64>>>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
            let mut rows = Vec::with_capacity(data.len());
            let mut labels = Vec::with_capacity(data.len());
            for g in 0..groups.len() {
                let pick = &groups[rng.random_range(0..groups.len())];
                rows.extend_from_slice(pick);
                labels.extend(std::iter::repeat_n(g, pick.len()));
            }
            statistic(&data.subset(&rows, labels))
        })
        .collect();

    let estimates: Vec<Vec<Option<f64>>> = outcomes.into_iter().filter_map(|o| o.ok()).collect();
    let failures = reps - estimates.len();
    if 2 * failures > reps {
        return Err(EstimationError::TooManyFailures { failed: failures, reps });
    }
    let width = estimates.first().map_or(0, |e| e.len());
    if let Some(bad) = estimates.iter().find(|e| e.len() != width) {
        return Err(EstimationError::DimensionMismatch { expected: width, found: bad.len() });
    }
    let intervals = (0..width)
        .map(|s| {
            let mut values: Vec<f64> = estimates.iter().filter_map(|e| e[s]).collect();
            if values.is_empty() {
                return None;
            }
            values.sort_by(f64::total_cmp);
            Some((percentile_sorted(&values, LOWER), percentile_sorted(&values, UPPER)))
        })
        .collect();
    Ok(BootstrapResult { reps, failures, estimates, intervals })
}

fn fit_statistics(fit: &MteFit) -> Vec<Option<f64>> {
    let mut out: Vec<Option<f64>> = fit.percentiles.iter().map(|e| e.estimate).collect();
    out.push(Some(fit.ate));
    out.extend(fit.first_stage.coefficients.iter().map(|&c| Some(c)));
    out.extend(curve_grid().map(|u| fit.mte(u).expect("grid lies inside (0, 1)")));
    out
}

/// Attaches cluster-bootstrap CIs to `fit`, re-running `estimator` (both
/// stages) on every replicate. With `reps == 0` the fit is returned
/// unchanged and all CI fields stay absent.
pub fn bootstrap_mte<F>(data: &EstimationData, mut fit: MteFit, reps: usize, seed: u64, estimator: F) -> Result<MteFit>
where
    F: Fn(&EstimationData) -> Result<MteFit> + Sync,
{
    if reps == 0 {
        return Ok(fit);
    }
    let result = cluster_bootstrap(data, reps, seed, |d| estimator(d).map(|f| fit_statistics(&f)))?;
    let n_pct = fit.percentiles.len();
    let n_coef = fit.first_stage.coefficients.len();
    let ci = &result.intervals;
    for (e, c) in fit.percentiles.iter_mut().zip(&ci[..n_pct]) {
        // absent point estimates keep absent intervals
        e.ci = if e.estimate.is_some() { *c } else { None };
    }
    fit.ate_ci = ci[n_pct];
    fit.first_stage_ci = Some(ci[n_pct + 1..n_pct + 1 + n_coef].to_vec());
    let curve = fit.curve();
    fit.curve_ci = Some(
        ci[n_pct + 1 + n_coef..]
            .iter()
            .zip(curve)
            .map(|(c, (_, m))| if m.is_some() { *c } else { None })
            .collect(),
    );
    fit.bootstrap = Some(BootstrapSummary { reps, failures: result.failures, seed });
    Ok(fit)
}
