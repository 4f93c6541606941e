//! Standard-normal helpers shared by the simulator and the estimators.

use statrs::function::erf::{erfc, erfc_inv};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density φ(z).
pub fn norm_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal CDF Φ(z).
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile Φ⁻¹(u) for u in (0, 1).
pub fn norm_quantile(u: f64) -> f64 {
    debug_assert!(u > 0.0 && u < 1.0);
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
}

/// φ(z)/Φ(z), accurate far into the lower tail where Φ underflows.
pub fn pdf_over_cdf(z: f64) -> f64 {
    if z > -30.0 {
        return norm_pdf(z) / norm_cdf(z);
    }
    // Laplace continued fraction for the Mills ratio of -z.
    let x = -z;
    let mut tail = x;
    for k in (1..=40).rev() {
        tail = x + k as f64 / tail;
    }
    tail
}

/// Sample mean; NaN for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with n-1 denominator.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    (ss / (xs.len() as f64 - 1.0)).sqrt()
}

/// Linear-interpolation percentile (type 7) of already sorted data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
