//! Gaussian-kernel local polynomial regression.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{EstimationError, Result};
use crate::stats::std_dev;

/// Kernel weights beyond this many bandwidths are below 1e-21 of the peak
/// and are skipped by [`LocalPolySmoother`].
const WINDOW: f64 = 10.0;

/// Fitted value and first derivative at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFit {
    pub value: f64,
    pub derivative: f64,
}

/// Weighted least squares of `ys` on powers of `(xs − x0)` up to `degree`
/// with weights `exp(−((xs − x0)/h)²/2)`.
pub fn local_polynomial(xs: &[f64], ys: &[f64], x0: f64, bandwidth: f64, degree: usize) -> Result<LocalFit> {
    if xs.len() != ys.len() {
        return Err(EstimationError::DimensionMismatch { expected: xs.len(), found: ys.len() });
    }
    let fits = solve_local_indexed(xs.iter().copied().enumerate(), &[ys], x0, bandwidth, degree)?;
    Ok(fits[0])
}

// Accumulates scaled moments Σw·t^j and Σw·t^j·y for every response column,
// then solves the (degree+1)² system.
fn solve_local_indexed<I>(points: I, columns: &[&[f64]], x0: f64, bandwidth: f64, degree: usize) -> Result<Vec<LocalFit>>
where
    I: Iterator<Item = (usize, f64)>,
{
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(EstimationError::InvalidBandwidth(bandwidth));
    }
    let p = degree + 1;
    let mut moments = vec![0.0; 2 * degree + 1];
    let mut cross = vec![vec![0.0; p]; columns.len()];
    let mut positive = 0usize;
    for (i, x) in points {
        let t = (x - x0) / bandwidth;
        let w = (-0.5 * t * t).exp();
        if w <= 0.0 {
            continue;
        }
        positive += 1;
        let mut tp = w;
        for m in moments.iter_mut() {
            *m += tp;
            tp *= t;
        }
        for (c, col) in columns.iter().enumerate() {
            let mut tp = w * col[i];
            for slot in cross[c].iter_mut() {
                *slot += tp;
                tp *= t;
            }
        }
    }
    if positive < p {
        return Err(EstimationError::InsufficientLocalData { points: positive, needed: p });
    }
    let s = DMatrix::from_fn(p, p, |a, b| moments[a + b]);
    let eig = SymmetricEigen::new(s.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 1e-13 * max) {
        return Err(EstimationError::SingularLocalDesign);
    }
    let lu = s.lu();
    cross
        .into_iter()
        .map(|rhs| {
            let b = lu.solve(&DVector::from_vec(rhs)).ok_or(EstimationError::SingularLocalDesign)?;
            Ok(LocalFit { value: b[0], derivative: if degree >= 1 { b[1] / bandwidth } else { 0.0 } })
        })
        .collect()
}

/// Reusable smoother over a fixed set of design points; only points within
/// ten bandwidths of the evaluation point contribute.
#[derive(Debug, Clone)]
pub struct LocalPolySmoother {
    sorted: Vec<(f64, usize)>,
    bandwidth: f64,
    degree: usize,
}

impl LocalPolySmoother {
    pub fn new(xs: &[f64], bandwidth: f64, degree: usize) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(EstimationError::InvalidBandwidth(bandwidth));
        }
        let mut sorted: Vec<(f64, usize)> = xs.iter().copied().zip(0..).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { sorted, bandwidth, degree })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Local fits of every response column at `x0`.
    pub fn fit_at(&self, x0: f64, columns: &[&[f64]]) -> Result<Vec<LocalFit>> {
        let lo = self.sorted.partition_point(|&(x, _)| x < x0 - WINDOW * self.bandwidth);
        let hi = self.sorted.partition_point(|&(x, _)| x <= x0 + WINDOW * self.bandwidth);
        let window = self.sorted[lo..hi].iter().map(|&(x, i)| (i, x));
        solve_local_indexed(window, columns, x0, self.bandwidth, self.degree)
    }

    /// Residuals `column − m̂(x)` for every design point, with `m̂` evaluated
    /// on an even grid across the data range and linearly interpolated.
    pub fn residualize(&self, columns: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let n = self.sorted.len();
        let (xmin, xmax) = (self.sorted[0].0, self.sorted[n - 1].0);
        let range = xmax - xmin;
        let steps = if range > 0.0 { ((range / (self.bandwidth / 8.0)).ceil() as usize).clamp(32, 4000) } else { 1 };
        let grid: Vec<f64> = (0..=steps).map(|g| xmin + range * g as f64 / steps as f64).collect();
        let fitted: Vec<Vec<LocalFit>> = grid.iter().map(|&g| self.fit_at(g, columns)).collect::<Result<_>>()?;
        let mut out = vec![vec![0.0; n]; columns.len()];
        for &(x, i) in &self.sorted {
            let (g0, frac) = if range > 0.0 {
                let pos = (x - xmin) / range * steps as f64;
                let g0 = (pos.floor() as usize).min(steps - 1);
                (g0, pos - g0 as f64)
            } else {
                (0, 0.0)
            };
            for c in 0..columns.len() {
                let a = fitted[g0][c].value;
                let b = if range > 0.0 { fitted[g0 + 1][c].value } else { a };
                out[c][i] = columns[c][i] - (a + (b - a) * frac);
            }
        }
        Ok(out)
    }
}

/// Silverman-type rule of thumb `1.06·sd(x)·n^(−1/5)`.
pub fn rule_of_thumb_bandwidth(xs: &[f64]) -> f64 {
    1.06 * std_dev(xs) * (xs.len() as f64).powf(-0.2)
}

/// Share of the design trimmed from each tail before the curvature of the
/// pilot fit is measured.
const PILOT_TRIM: f64 = 0.05;

/// Rule-of-thumb bandwidth for the first derivative from a local polynomial
/// of `degree` (Fan and Gijbels), Gaussian kernel:
///
/// `h = C·[σ²·∫w₀ / Σᵢ w₀(xᵢ)·m^(degree+1)(xᵢ)²]^(1/(2·degree+3))`
///
/// with `m` and `σ²` from a global polynomial pilot of order `degree + 3`
/// and `w₀` the indicator of the central 90% of the design. The curvature
/// sum subtracts the sampling variance of the pilot derivative, so flat
/// regressions get the largest bandwidth (the data range). The formula needs
/// an even degree; odd degrees use `degree + 1`.
pub fn derivative_bandwidth(xs: &[f64], ys: &[f64], degree: usize) -> Result<f64> {
    let degree = if degree % 2 == 1 { degree + 1 } else { degree.max(2) };
    let n = xs.len();
    if ys.len() != n {
        return Err(EstimationError::DimensionMismatch { expected: n, found: ys.len() });
    }
    let order = degree + 3;
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let range = hi - lo;
    let centre = 0.5 * (lo + hi);
    let half = (0.5 * range).max(1e-12);
    let design = DMatrix::from_fn(n, order + 1, |i, j| ((xs[i] - centre) / half).powi(j as i32));
    let y = DVector::from_row_slice(ys);
    let (coef, gram_inv) = super::ols::ols_coefficients(&y, &design, "bandwidth pilot polynomial")?;
    let resid = &y - &design * &coef;
    let sigma2 = resid.norm_squared() / (n as f64 - (order + 1) as f64);

    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let w_lo = crate::stats::percentile_sorted(&sorted, PILOT_TRIM);
    let w_hi = crate::stats::percentile_sorted(&sorted, 1.0 - PILOT_TRIM);

    // gradient of m^(r)(x) with respect to the pilot coefficients
    let r = degree + 1;
    let scale = half.powi(r as i32);
    let mut grad = DVector::zeros(order + 1);
    let mut ss = 0.0;
    for &x in xs.iter().filter(|&&x| x >= w_lo && x <= w_hi) {
        let u = (x - centre) / half;
        for j in 0..=order {
            grad[j] = if j < r {
                0.0
            } else {
                (0..r).map(|k| (j - k) as f64).product::<f64>() * u.powi((j - r) as i32) / scale
            };
        }
        let deriv = grad.dot(&coef);
        let noise = sigma2 * (&gram_inv * &grad).dot(&grad);
        ss += deriv * deriv - noise;
    }
    if !(ss > 0.0) {
        return Ok(range.max(1e-6));
    }
    let constant = derivative_kernel_constant(degree);
    let h = constant * (sigma2 * (w_hi - w_lo) / ss).powf(1.0 / (2 * degree + 3) as f64);
    Ok(h.min(range).max(1e-6))
}

// C_{1,p}(K) for the Gaussian kernel via the equivalent kernel of the first
// derivative; p even.
fn derivative_kernel_constant(degree: usize) -> f64 {
    let p = degree;
    // Gaussian moments mu_j = E[t^j]
    let mu = |j: usize| -> f64 { if j % 2 == 1 { 0.0 } else { (1..j).step_by(2).map(|k| k as f64).product() } };
    let s = DMatrix::from_fn(p + 1, p + 1, |a, b| mu(a + b));
    let s_inv = s.try_inverse().expect("Gaussian moment matrix is invertible");
    let row: Vec<f64> = (0..=p).map(|j| s_inv[(1, j)]).collect();
    // ∫K*² = Σ_ab row_a row_b ∫t^{a+b} K² ; ∫t^m K(t)² dt = mu(m)/ (2√π · 2^{m/2})
    let k2 = |m: usize| -> f64 {
        if m % 2 == 1 {
            0.0
        } else {
            mu(m) / (2.0 * std::f64::consts::PI.sqrt() * 2f64.powi((m / 2) as i32))
        }
    };
    let mut int_k2 = 0.0;
    for a in 0..=p {
        for b in 0..=p {
            int_k2 += row[a] * row[b] * k2(a + b);
        }
    }
    let moment: f64 = (0..=p).map(|a| row[a] * mu(a + p + 1)).sum();
    let fact: f64 = (1..=p + 1).map(|k| k as f64).product();
    let nu = 1.0;
    (fact * fact * (2.0 * nu + 1.0) * int_k2 / (2.0 * (p as f64 + 1.0 - nu) * moment * moment)).powf(1.0 / (2 * p + 3) as f64)
}
