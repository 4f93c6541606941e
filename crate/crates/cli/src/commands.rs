//! Subcommand implementations. Every failure is reported with the name of
//! the stage that raised it.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mte_core::econometrics::{
    bootstrap_mte, mte_parametric, mte_semiparametric, EstimationData, EstimatorKind, MteFit, SemiparametricOptions,
    PERCENTILE_GRID,
};
use mte_core::market::ingest_premium_csv;
use mte_core::pipeline::{design_matrix, ingest_panel_csv, prepare_sample, write_dropped_csv, write_panel_csv};
use mte_core::synthgen::{export_roy_panel, simulate_roy, true_mte, DgpConfig, MteOracle};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, Estimator, McConfig, Overrides, RunConfig};
use crate::report::{compare, Metadata, ReportBundle};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn stage(name: &str) -> String {
    format!("{name} stage failed")
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Runs either estimator.
pub fn fit_with(kind: EstimatorKind, options: &SemiparametricOptions, data: &EstimationData) -> mte_core::econometrics::Result<MteFit> {
    match kind {
        EstimatorKind::ParametricNormal => mte_parametric(data),
        EstimatorKind::Semiparametric => mte_semiparametric(data, options),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OraclePoint {
    pub u: f64,
    pub mte: f64,
}

/// True MTE parameters of a simulated panel, evaluated at the sample
/// covariate means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFile {
    pub config_hash: String,
    pub seed: u64,
    pub oracle: MteOracle,
    pub covariate_names: Vec<String>,
    pub x_bar: Vec<f64>,
    pub ate: f64,
    pub percentiles: Vec<OraclePoint>,
}

/// Writes `panel.csv` and `oracle.json` into `out`.
pub fn simulate(config_path: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))
        .context(stage("config"))?;
    let mut config = DgpConfig::from_toml(&text).context(stage("config"))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let (panel, oracle) = simulate_roy(&config).context(stage("simulation"))?;
    let exported = export_roy_panel(&panel).context(stage("export"))?;
    let data = panel.estimation_data().context(stage("simulation"))?;
    let x_bar: Vec<f64> = data.covariate_means().iter().copied().collect();
    let percentiles = PERCENTILE_GRID
        .iter()
        .map(|&u| Ok(OraclePoint { u, mte: true_mte(&oracle, &x_bar, u)? }))
        .collect::<Result<Vec<_>>>()?;
    let file = OracleFile {
        config_hash: config_hash(&config),
        seed: config.seed,
        ate: oracle.ate(&x_bar),
        oracle,
        covariate_names: config.covariate_names(),
        x_bar,
        percentiles,
    };

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).context(stage("output"))?;
    let mut w = create(out, "panel.csv").context(stage("output"))?;
    write_panel_csv(&exported, &mut w).context(stage("output"))?;
    w.flush().context(stage("output"))?;
    write_json(out, "oracle.json", &file).context(stage("output"))?;
    Ok(())
}

/// Result of `estimate`, also written to disk.
pub struct EstimateOutput {
    pub bundle: ReportBundle,
    pub fit: MteFit,
}

/// Runs pipeline and estimator and writes `report.json`, `mte_curve.csv`,
/// `support.csv` and `dropped_rows.csv` into `out`.
pub fn estimate(config_path: &Path, overrides: &Overrides, out: &Path) -> Result<EstimateOutput> {
    let config = RunConfig::load(config_path, overrides).context(stage("config"))?;
    let panel_file = File::open(&config.input.panel)
        .with_context(|| format!("opening {}", config.input.panel.display()))
        .context(stage("ingest"))?;
    let ingested = ingest_panel_csv(panel_file).context(stage("ingest"))?;
    let premiums = match &config.input.premiums {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display())).context(stage("premiums"))?;
            Some(ingest_premium_csv(f).context(stage("premiums"))?)
        }
        None => None,
    };
    let prepared = prepare_sample(ingested, premiums.as_ref(), &config.sample_options()).context(stage("pipeline"))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).context(stage("output"))?;
    let mut w = create(out, "dropped_rows.csv").context(stage("output"))?;
    write_dropped_csv(&prepared.dropped, &mut w).context(stage("output"))?;
    w.flush().context(stage("output"))?;

    let data = design_matrix(&prepared.rows, &prepared.extra_columns, &config.design_spec()).context(stage("design"))?;
    let kind: EstimatorKind = config.estimation.estimator.into();
    let options = config.semiparametric_options();
    let fit = fit_with(kind, &options, &data).context(stage("estimation"))?;
    let e = &config.estimation;
    let fit = match (e.reps, e.seed) {
        (0, _) => fit,
        (reps, Some(seed)) => {
            bootstrap_mte(&data, fit, reps, seed, |d| fit_with(kind, &options, d)).context(stage("bootstrap"))?
        }
        (_, None) => unreachable!("validated: bootstrap requires a seed"),
    };

    let metadata = Metadata {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: config_hash(&config),
        seed: e.seed,
        estimator: kind.code().to_string(),
        treatment: config.design_spec().side.code().to_string(),
        n_obs: fit.n_obs,
        stratum: e.stratum.clone(),
        stable_only: e.stable_only,
    };
    let bundle = ReportBundle::from_fit(&fit, &data.covariate_names, metadata, &prepared.ledger);
    write_json(out, "report.json", &bundle).context(stage("output"))?;
    write_curve(&fit, out).context(stage("output"))?;
    write_support(&fit, out).context(stage("output"))?;
    Ok(EstimateOutput { bundle, fit })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `u,mte,ci_lo,ci_hi` on the 0.01 grid; points outside a semiparametric
/// support are omitted.
fn write_curve(fit: &MteFit, out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(out, "mte_curve.csv")?);
    w.write_record(["u", "mte", "ci_lo", "ci_hi"])?;
    for (k, (u, m)) in fit.curve().into_iter().enumerate() {
        let Some(m) = m else { continue };
        let ci = fit.curve_ci.as_ref().and_then(|c| c[k]);
        w.write_record([format!("{u:.2}"), m.to_string(), opt(ci.map(|c| c.0)), opt(ci.map(|c| c.1))])?;
    }
    w.flush()?;
    Ok(())
}

fn write_support(fit: &MteFit, out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(out, "support.csv")?);
    w.write_record(["bin_lo", "bin_hi", "treated", "untreated", "in_support"])?;
    if let Some(s) = &fit.support {
        for (i, b) in s.bins.iter().enumerate() {
            let inside = i >= s.first_bin && i <= s.last_bin;
            w.write_record([
                b.lower.to_string(),
                b.upper.to_string(),
                b.treated.to_string(),
                b.untreated.to_string(),
                u8::from(inside).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Prints the side-by-side table and, with `out`, writes `comparison.csv`.
pub fn report(paths: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let bundles = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ReportBundle::from_json(&text).with_context(|| format!("loading {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()
        .context(stage("report input"))?;
    let table = compare(&bundles).context(stage("report"))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).context(stage("output"))?;
        table.write_csv(create(dir, "comparison.csv")?).context(stage("output"))?;
    }
    Ok(table.to_text())
}

/// One estimated quantity of one replicate.
#[derive(Debug, Clone, PartialEq)]
struct Draw {
    quantity: &'static str,
    u: Option<f64>,
    estimate: Option<f64>,
    truth: f64,
    ci: Option<(f64, f64)>,
}

struct ReplicateResult {
    replicate: usize,
    dgp_seed: u64,
    estimator: Estimator,
    draws: std::result::Result<Vec<Draw>, String>,
}

/// Bootstrap interval at `u`: the percentile-table entry if `u` is on that
/// grid, else the curve entry if `u` is a multiple of 0.01.
fn ci_at(fit: &MteFit, u: f64) -> Option<(f64, f64)> {
    if let Some(e) = fit.percentiles.iter().find(|e| (e.u - u).abs() < 1e-12) {
        return e.ci;
    }
    let k = (u * 100.0).round();
    if (u * 100.0 - k).abs() < 1e-9 && k >= 1.0 {
        return fit.curve_ci.as_ref().and_then(|c| c.get(k as usize - 1).copied().flatten());
    }
    None
}

fn run_replicate(
    dgp: &DgpConfig,
    oracle: &MteOracle,
    grid: &[f64],
    estimator: Estimator,
    options: &SemiparametricOptions,
    reps: usize,
    boot_seed: u64,
) -> std::result::Result<Vec<Draw>, String> {
    let (panel, _) = simulate_roy(dgp).map_err(|e| format!("simulation: {e}"))?;
    let data = panel.estimation_data().map_err(|e| format!("simulation: {e}"))?;
    let kind: EstimatorKind = estimator.into();
    let fit = fit_with(kind, options, &data).map_err(|e| format!("estimation: {e}"))?;
    let fit = if reps > 0 {
        bootstrap_mte(&data, fit, reps, boot_seed, |d| fit_with(kind, options, d)).map_err(|e| format!("bootstrap: {e}"))?
    } else {
        fit
    };
    let x_bar: Vec<f64> = fit.x_bar.iter().copied().collect();
    let mut draws = Vec::with_capacity(grid.len() + 2);
    for &u in grid {
        draws.push(Draw {
            quantity: "mte",
            u: Some(u),
            estimate: fit.mte(u).map_err(|e| format!("estimation: {e}"))?,
            truth: true_mte(oracle, &x_bar, u).map_err(|e| e.to_string())?,
            ci: ci_at(&fit, u),
        });
    }
    draws.push(Draw { quantity: "ate", u: None, estimate: Some(fit.ate), truth: oracle.ate(&x_bar), ci: fit.ate_ci });
    if let Some(g) = fit.cov_gap() {
        draws.push(Draw { quantity: "cov_gap", u: None, estimate: Some(g), truth: oracle.cov_gap, ci: None });
    }
    Ok(draws)
}

/// Aggregate of one (estimator, quantity, u) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub quantity: String,
    pub u: Option<f64>,
    pub n: usize,
    pub failures: usize,
    pub mean_estimate: f64,
    pub mean_truth: f64,
    pub bias: f64,
    pub rmse: f64,
    /// Share of replicates whose CI covers the truth; absent without CIs.
    pub coverage: Option<f64>,
    pub mean_ci_width: Option<f64>,
}

/// Simulates `replications` panels with derived seeds, estimates each with
/// every configured estimator and writes `mc_summary.csv` and
/// `mc_replicates.csv`. Aborts if more than half the replicates of any
/// estimator fail.
pub fn mc_study(config_path: &Path, seed: Option<u64>, reps: Option<usize>, out: &Path) -> Result<Vec<SummaryRow>> {
    let config = McConfig::load(config_path, seed, reps).context(stage("config"))?;
    let text = fs::read_to_string(&config.dgp)
        .with_context(|| format!("reading {}", config.dgp.display()))
        .context(stage("config"))?;
    let mut base = DgpConfig::from_toml(&text).context(stage("config"))?;
    if let Some(n) = config.n_agents {
        base.n_agents = n;
        base.validate().context(stage("config"))?;
    }
    let oracle = base.oracle();
    let grid = config.grid.clone().unwrap_or_else(|| PERCENTILE_GRID.to_vec());
    let options = config.semiparametric_options();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let seeds: Vec<(u64, u64)> = (0..config.replications).map(|_| (rng.next_u64(), rng.next_u64())).collect();
    let jobs: Vec<(usize, Estimator)> =
        (0..config.replications).flat_map(|r| config.estimators.iter().map(move |&e| (r, e))).collect();
    let results: Vec<ReplicateResult> = jobs
        .par_iter()
        .map(|&(r, estimator)| {
            let (dgp_seed, boot_seed) = seeds[r];
            let dgp = DgpConfig { seed: dgp_seed, ..base.clone() };
            ReplicateResult {
                replicate: r,
                dgp_seed,
                estimator,
                draws: run_replicate(&dgp, &oracle, &grid, estimator, &options, config.reps, boot_seed),
            }
        })
        .collect();

    let mut summary = Vec::new();
    for &estimator in &config.estimators {
        let mine: Vec<&ReplicateResult> = results.iter().filter(|r| r.estimator == estimator).collect();
        let ok: Vec<&Vec<Draw>> = mine.iter().filter_map(|r| r.draws.as_ref().ok()).collect();
        let failures = mine.len() - ok.len();
        let code = EstimatorKind::from(estimator).code();
        if 2 * failures > mine.len() {
            let first = mine.iter().find_map(|r| r.draws.as_ref().err()).cloned().unwrap_or_default();
            bail!("{}: {failures} of {} replicates failed for {code}; first error: {first}", stage("mc-study"), mine.len());
        }
        let Some(template) = ok.first() else { continue };
        for (j, d0) in template.iter().enumerate() {
            let cells: Vec<&Draw> = ok.iter().filter_map(|d| d.get(j)).filter(|d| d.quantity == d0.quantity && d.u == d0.u).collect();
            let pairs: Vec<(f64, &Draw)> = cells.iter().filter_map(|d| d.estimate.map(|e| (e, *d))).collect();
            if pairs.is_empty() {
                continue;
            }
            let n = pairs.len() as f64;
            let mean_estimate = pairs.iter().map(|p| p.0).sum::<f64>() / n;
            let mean_truth = pairs.iter().map(|p| p.1.truth).sum::<f64>() / n;
            let bias = pairs.iter().map(|p| p.0 - p.1.truth).sum::<f64>() / n;
            let rmse = (pairs.iter().map(|p| (p.0 - p.1.truth).powi(2)).sum::<f64>() / n).sqrt();
            let with_ci: Vec<(f64, (f64, f64))> = pairs.iter().filter_map(|p| p.1.ci.map(|c| (p.1.truth, c))).collect();
            let (coverage, mean_ci_width) = if with_ci.is_empty() {
                (None, None)
            } else {
                let m = with_ci.len() as f64;
                let covered = with_ci.iter().filter(|(t, (lo, hi))| lo <= t && t <= hi).count() as f64;
                (Some(covered / m), Some(with_ci.iter().map(|(_, (lo, hi))| hi - lo).sum::<f64>() / m))
            };
            summary.push(SummaryRow {
                estimator: code.to_string(),
                quantity: d0.quantity.to_string(),
                u: d0.u,
                n: pairs.len(),
                failures,
                mean_estimate,
                mean_truth,
                bias,
                rmse,
                coverage,
                mean_ci_width,
            });
        }
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).context(stage("output"))?;
    write_mc_outputs(&summary, &results, out).context(stage("output"))?;
    Ok(summary)
}

fn write_mc_outputs(summary: &[SummaryRow], results: &[ReplicateResult], out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(out, "mc_summary.csv")?);
    w.write_record([
        "estimator", "quantity", "u", "n", "failures", "mean_estimate", "mean_truth", "bias", "rmse", "coverage",
        "mean_ci_width",
    ])?;
    for s in summary {
        w.write_record([
            s.estimator.clone(),
            s.quantity.clone(),
            opt(s.u),
            s.n.to_string(),
            s.failures.to_string(),
            s.mean_estimate.to_string(),
            s.mean_truth.to_string(),
            s.bias.to_string(),
            s.rmse.to_string(),
            opt(s.coverage),
            opt(s.mean_ci_width),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(out, "mc_replicates.csv")?);
    w.write_record(["replicate", "dgp_seed", "estimator", "quantity", "u", "estimate", "truth", "ci_lo", "ci_hi", "error"])?;
    for r in results {
        let code = EstimatorKind::from(r.estimator).code();
        match &r.draws {
            Ok(draws) => {
                for d in draws {
                    w.write_record([
                        r.replicate.to_string(),
                        r.dgp_seed.to_string(),
                        code.to_string(),
                        d.quantity.to_string(),
                        opt(d.u),
                        opt(d.estimate),
                        d.truth.to_string(),
                        opt(d.ci.map(|c| c.0)),
                        opt(d.ci.map(|c| c.1)),
                        String::new(),
                    ])?;
                }
            }
            Err(e) => {
                let blank = String::new;
                w.write_record([
                    r.replicate.to_string(),
                    r.dgp_seed.to_string(),
                    code.to_string(),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                    e.clone(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
