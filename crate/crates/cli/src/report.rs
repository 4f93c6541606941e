//! Versioned JSON report bundle and side-by-side tables.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use mte_core::econometrics::{MteFit, SelectionTerms};
use mte_core::pipeline::StageCount;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub estimator: String,
    pub treatment: String,
    pub n_obs: usize,
    pub stratum: Option<String>,
    pub stable_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub u: f64,
    pub estimate: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub outside_support: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub delta_intercept: Option<f64>,
    pub delta_beta: Vec<NamedValue>,
    pub x_bar: Vec<NamedValue>,
    pub sigma1v: Option<f64>,
    pub sigma0v: Option<f64>,
    pub cov_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSummary {
    pub p_lo: f64,
    pub p_hi: f64,
    pub bin_width: f64,
    pub min_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    pub residual: f64,
    pub derivative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInfo {
    pub reps: usize,
    pub failures: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub input: usize,
    pub output: usize,
    pub dropped: std::collections::BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema_version: u32,
    pub metadata: Metadata,
    pub percentiles: Vec<PercentileRow>,
    pub ate: Estimate,
    pub first_stage: Vec<Coefficient>,
    pub outcome: OutcomeSummary,
    pub support: Option<SupportSummary>,
    pub bandwidths: Option<Bandwidths>,
    /// Absent when no bootstrap was run; every CI field is then absent too.
    pub bootstrap: Option<BootstrapInfo>,
    pub sample: Vec<StageRow>,
}

fn split(ci: Option<(f64, f64)>) -> (Option<f64>, Option<f64>) {
    (ci.map(|c| c.0), ci.map(|c| c.1))
}

impl ReportBundle {
    pub fn from_fit(fit: &MteFit, covariate_names: &[String], metadata: Metadata, ledger: &[StageCount]) -> Self {
        let percentiles = fit
            .percentiles
            .iter()
            .map(|e| {
                let (ci_lo, ci_hi) = split(e.ci);
                PercentileRow { u: e.u, estimate: e.estimate, ci_lo, ci_hi, outside_support: e.outside_support }
            })
            .collect();
        let (ci_lo, ci_hi) = split(fit.ate_ci);
        let se = fit.first_stage.standard_errors();
        let first_stage = fit
            .selection_names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let (ci_lo, ci_hi) = split(fit.first_stage_ci.as_ref().and_then(|c| c[j]));
                Coefficient { name: name.clone(), estimate: fit.first_stage.coefficients[j], std_error: se[j], ci_lo, ci_hi }
            })
            .collect();
        let named = |v: &[f64]| {
            covariate_names.iter().zip(v).map(|(n, &value)| NamedValue { name: n.clone(), value }).collect::<Vec<_>>()
        };
        let (sigma1v, sigma0v) = match fit.selection {
            SelectionTerms::Normal { sigma1v, sigma0v } => (Some(sigma1v), Some(sigma0v)),
            SelectionTerms::Semiparametric { .. } => (None, None),
        };
        ReportBundle {
            schema_version: SCHEMA_VERSION,
            metadata,
            percentiles,
            ate: Estimate { estimate: fit.ate, ci_lo, ci_hi },
            first_stage,
            outcome: OutcomeSummary {
                delta_intercept: fit.delta_intercept,
                delta_beta: named(fit.delta_beta.as_slice()),
                x_bar: named(fit.x_bar.as_slice()),
                sigma1v,
                sigma0v,
                cov_gap: fit.cov_gap(),
            },
            support: fit.support.as_ref().map(|s| SupportSummary {
                p_lo: s.p_lo,
                p_hi: s.p_hi,
                bin_width: s.bin_width,
                min_count: s.min_count,
            }),
            bandwidths: fit.bandwidths.map(|(residual, derivative)| Bandwidths { residual, derivative }),
            bootstrap: fit.bootstrap.as_ref().map(|b| BootstrapInfo { reps: b.reps, failures: b.failures, seed: b.seed }),
            sample: ledger
                .iter()
                .map(|s| StageRow { stage: s.stage.to_string(), input: s.input, output: s.output, dropped: s.dropped.clone() })
                .collect(),
        }
    }

    /// Parses a bundle, rejecting other schema versions.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => Ok(serde_json::from_value(value)?),
            Some(v) => bail!("report schema version {v} is not supported (expected {SCHEMA_VERSION})"),
            None => bail!("report has no schema_version"),
        }
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.metadata.estimator, self.metadata.treatment)
    }
}

fn cell(estimate: Option<f64>, lo: Option<f64>, hi: Option<f64>) -> String {
    match (estimate, lo, hi) {
        (None, ..) => "-".to_string(),
        (Some(e), Some(l), Some(h)) => format!("{e:.3} [{l:.3}, {h:.3}]"),
        (Some(e), ..) => format!("{e:.3}"),
    }
}

fn percentile_label(u: f64) -> String {
    let k = (u * 100.0).round() as i64;
    if (u * 100.0 - k as f64).abs() > 1e-9 {
        return format!("u = {u}");
    }
    let suffix = match (k % 10, k % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{k}{suffix} percentile")
}

/// Aligned rows across bundles: one row per percentile, then ATE and sample
/// size. Out-of-support entries render as `-`.
pub struct Comparison {
    pub labels: Vec<String>,
    pub rows: Vec<(String, Vec<String>)>,
}

pub fn compare(bundles: &[ReportBundle]) -> Result<Comparison> {
    if bundles.is_empty() {
        bail!("report needs at least one bundle");
    }
    let mut labels: Vec<String> = Vec::new();
    for b in bundles {
        let base = b.label();
        let mut label = base.clone();
        let mut k = 2;
        while labels.contains(&label) {
            label = format!("{base}#{k}");
            k += 1;
        }
        labels.push(label);
    }
    let mut grid: Vec<f64> = bundles.iter().flat_map(|b| b.percentiles.iter().map(|p| p.u)).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let mut rows = Vec::new();
    for &u in &grid {
        let cells = bundles
            .iter()
            .map(|b| match b.percentiles.iter().find(|p| (p.u - u).abs() < 1e-12) {
                Some(p) => cell(p.estimate, p.ci_lo, p.ci_hi),
                None => "-".to_string(),
            })
            .collect();
        rows.push((percentile_label(u), cells));
    }
    rows.push(("ATE".into(), bundles.iter().map(|b| cell(Some(b.ate.estimate), b.ate.ci_lo, b.ate.ci_hi)).collect()));
    rows.push(("Observations".into(), bundles.iter().map(|b| b.metadata.n_obs.to_string()).collect()));
    Ok(Comparison { labels, rows })
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let first = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(4);
        let widths: Vec<usize> = (0..self.labels.len())
            .map(|j| self.rows.iter().map(|r| r.1[j].len()).chain([self.labels[j].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let _ = write!(out, "{:<first$}", "MTE");
        for (l, w) in self.labels.iter().zip(&widths) {
            let _ = write!(out, "  {l:>w$}");
        }
        out.push('\n');
        for (name, cells) in &self.rows {
            let _ = write!(out, "{name:<first$}");
            for (c, w) in cells.iter().zip(&widths) {
                let _ = write!(out, "  {c:>w$}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: std::io::Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["row".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for (name, cells) in &self.rows {
            let mut rec = vec![name.clone()];
            rec.extend(cells.iter().map(|c| if c == "-" { String::new() } else { c.clone() }));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
