//! Common support of the propensity score across treatment arms.

use super::{EstimationError, Result};

pub const DEFAULT_BIN_WIDTH: f64 = 0.01;
pub const DEFAULT_MIN_COUNT: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SupportBin {
    pub lower: f64,
    pub upper: f64,
    pub treated: usize,
    pub untreated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportRegion {
    pub bin_width: f64,
    pub min_count: usize,
    pub bins: Vec<SupportBin>,
    /// Index range (inclusive) of the supported run within `bins`.
    pub first_bin: usize,
    pub last_bin: usize,
    pub p_lo: f64,
    pub p_hi: f64,
}

impl SupportRegion {
    pub fn contains(&self, u: f64) -> bool {
        u >= self.p_lo && u <= self.p_hi
    }

    pub fn bin_supported(&self, bin: &SupportBin) -> bool {
        bin.treated >= self.min_count && bin.untreated >= self.min_count
    }
}

fn bin_index(p: f64, width: f64, n_bins: usize) -> usize {
    // tolerance keeps values like 0.29 out of bin 28
    (((p / width) + 1e-9).floor().max(0.0) as usize).min(n_bins - 1)
}

/// Longest contiguous run of propensity bins in which both arms have at
/// least `min_count` observations. Ties go to the lower run.
pub fn common_support(p: &[f64], treated: &[bool], bin_width: f64, min_count: usize) -> Result<SupportRegion> {
    if p.len() != treated.len() {
        return Err(EstimationError::DimensionMismatch { expected: p.len(), found: treated.len() });
    }
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(EstimationError::InvalidBinWidth(bin_width));
    }
    if let Some(&bad) = p.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(EstimationError::BoundaryProbability(bad));
    }
    let n_bins = (1.0 / bin_width).round().max(1.0) as usize;
    let mut bins: Vec<SupportBin> = (0..n_bins)
        .map(|b| SupportBin {
            lower: b as f64 * bin_width,
            upper: if b + 1 == n_bins { 1.0 } else { (b + 1) as f64 * bin_width },
            treated: 0,
            untreated: 0,
        })
        .collect();
    for (&pi, &di) in p.iter().zip(treated) {
        let b = &mut bins[bin_index(pi, bin_width, n_bins)];
        if di {
            b.treated += 1;
        } else {
            b.untreated += 1;
        }
    }
    let ok = |b: &SupportBin| b.treated >= min_count.max(1) && b.untreated >= min_count.max(1);
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for i in 0..=n_bins {
        let supported = i < n_bins && ok(&bins[i]);
        match (supported, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                let len = i - s;
                if best.is_none_or(|(a, b)| len > b - a + 1) {
                    best = Some((s, i - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    let (first_bin, last_bin) = best.ok_or(EstimationError::EmptySupport)?;
    Ok(SupportRegion {
        bin_width,
        min_count: min_count.max(1),
        p_lo: bins[first_bin].lower,
        p_hi: bins[last_bin].upper,
        bins,
        first_bin,
        last_bin,
    })
}
