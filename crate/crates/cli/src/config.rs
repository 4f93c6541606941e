//! TOML run configurations.
//!
//! Relative paths inside a config file resolve against the file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mte_core::econometrics::{DerivativeBandwidth, EstimatorKind, SemiparametricOptions, DEFAULT_REPS};
use mte_core::pipeline::{DesignSpec, SampleOptions, TreatmentSide};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Lowest,
    Highest,
}

impl From<Side> for TreatmentSide {
    fn from(s: Side) -> Self {
        match s {
            Side::Lowest => TreatmentSide::Lowest,
            Side::Highest => TreatmentSide::Highest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Normal,
    Semipar,
}

impl From<Estimator> for EstimatorKind {
    fn from(e: Estimator) -> Self {
        match e {
            Estimator::Normal => EstimatorKind::ParametricNormal,
            Estimator::Semipar => EstimatorKind::Semiparametric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    pub panel: PathBuf,
    /// Premium CSV; when given, rows get the cell-average premium as
    /// `avg_premium`.
    #[serde(default)]
    pub premiums: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub outcome: String,
    pub instruments: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub canton_effects: bool,
    #[serde(default = "default_cluster")]
    pub cluster: String,
    /// Drop zero-visit rows.
    #[serde(default)]
    pub intensive_margin: bool,
    /// Keep only rows of these years; all lagged years when absent.
    #[serde(default)]
    pub years: Option<Vec<i32>>,
}

fn default_cluster() -> String {
    "canton".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum DerivativeRule {
    SupportFraction { fraction: f64 },
    RuleOfThumb,
    Fixed { h: f64 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthSection {
    #[serde(default)]
    pub residual: Option<f64>,
    #[serde(default)]
    pub derivative: Option<DerivativeRule>,
}

impl BandwidthSection {
    pub fn semiparametric_options(&self) -> SemiparametricOptions {
        let mut o = SemiparametricOptions { residual_bandwidth: self.residual, ..Default::default() };
        if let Some(rule) = self.derivative {
            o.derivative_bandwidth = match rule {
                DerivativeRule::SupportFraction { fraction } => DerivativeBandwidth::SupportFraction(fraction),
                DerivativeRule::RuleOfThumb => DerivativeBandwidth::RuleOfThumb,
                DerivativeRule::Fixed { h } => DerivativeBandwidth::Fixed(h),
            };
        }
        o
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSection {
    #[serde(default = "default_side")]
    pub treatment: Side,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub stable_only: bool,
    /// Second year of the stability comparison.
    #[serde(default = "default_stable_year")]
    pub stable_year: i32,
    #[serde(default)]
    pub stratum: Option<String>,
    #[serde(default)]
    pub bandwidth: BandwidthSection,
}

fn default_side() -> Side {
    Side::Lowest
}
fn default_estimator() -> Estimator {
    Estimator::Normal
}
fn default_reps() -> usize {
    DEFAULT_REPS
}
fn default_stable_year() -> i32 {
    2019
}

/// Configuration of `estimate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputSection,
    pub design: DesignSection,
    pub estimation: EstimationSection,
}

/// Command-line values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub treatment: Option<Side>,
    pub estimator: Option<Estimator>,
    pub reps: Option<usize>,
    pub stable_only: bool,
    pub stratum: Option<String>,
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Reads `path`, applies overrides and resolves input paths.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let mut config: RunConfig = read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.input.panel = resolve(base, &config.input.panel);
        config.input.premiums = config.input.premiums.as_deref().map(|p| resolve(base, p));
        let e = &mut config.estimation;
        if let Some(s) = overrides.seed {
            e.seed = Some(s);
        }
        if let Some(t) = overrides.treatment {
            e.treatment = t;
        }
        if let Some(k) = overrides.estimator {
            e.estimator = k;
        }
        if let Some(r) = overrides.reps {
            e.reps = r;
        }
        e.stable_only |= overrides.stable_only;
        if overrides.stratum.is_some() {
            e.stratum.clone_from(&overrides.stratum);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.estimation.reps > 0 && self.estimation.seed.is_none() {
            bail!("a seed is required when bootstrap reps > 0 (set estimation.seed or pass --seed)");
        }
        if self.design.instruments.is_empty() {
            bail!("design.instruments must name at least one column");
        }
        Ok(())
    }

    pub fn design_spec(&self) -> DesignSpec {
        DesignSpec {
            outcome: self.design.outcome.clone(),
            instruments: self.design.instruments.clone(),
            covariates: self.design.covariates.clone(),
            canton_effects: self.design.canton_effects,
            cluster: self.design.cluster.clone(),
            side: self.estimation.treatment.into(),
        }
    }

    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions {
            intensive_margin: self.design.intensive_margin,
            stable_year: self.estimation.stable_only.then_some(self.estimation.stable_year),
            stratum: self.estimation.stratum.clone(),
            years: self.design.years.clone(),
        }
    }

    pub fn semiparametric_options(&self) -> SemiparametricOptions {
        self.estimation.bandwidth.semiparametric_options()
    }
}

/// SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// Configuration of `mc-study`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    /// DGP config file.
    pub dgp: PathBuf,
    pub replications: usize,
    pub seed: u64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    /// Bootstrap reps per replicate; 0 skips coverage.
    #[serde(default)]
    pub reps: usize,
    #[serde(default)]
    pub n_agents: Option<usize>,
    /// Quantiles to evaluate; the percentile grid when absent.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default)]
    pub bandwidth: BandwidthSection,
}

fn default_estimators() -> Vec<Estimator> {
    vec![Estimator::Normal]
}

impl McConfig {
    pub fn load(path: &Path, seed: Option<u64>, reps: Option<usize>) -> Result<Self> {
        let mut config: McConfig = read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.dgp = resolve(base, &config.dgp);
        if let Some(s) = seed {
            config.seed = s;
        }
        if let Some(r) = reps {
            config.reps = r;
        }
        if config.replications == 0 {
            bail!("replications must be at least 1");
        }
        if config.estimators.is_empty() {
            bail!("estimators must list at least one estimator");
        }
        if let Some(g) = &config.grid {
            if g.iter().any(|&u| !(u > 0.0 && u < 1.0)) {
                bail!("grid points must lie in (0, 1)");
            }
        }
        Ok(config)
    }

    pub fn semiparametric_options(&self) -> SemiparametricOptions {
        self.bandwidth.semiparametric_options()
    }
}
