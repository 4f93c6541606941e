//! Synthetic panels with known truth.
//!
//! [`simulate_roy`] draws from the normal Roy model
//!
//! ```text
//! yʲ = αʲ + Xβʲ + ωʲ,   D = 1{Zψ − V > 0},   (ω⁰, ω¹, V) ~ N(0, Σ),  Var V = 1
//! ```
//!
//! and returns the closed-form MTE alongside the panel.
//! [`simulate_structural`] routes agents of the structural model through a
//! priced plan menu instead.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::econometrics::{EstimationData, EstimationError};
use crate::market::{marginal_price, Canton, Chf, Deductible, MarketError, PlanType};
use crate::model::{choose_plan, optimal_utilization, AgentPreferences, MenuEntry, ModelError};
use crate::pipeline::{Employment, Panel, PanelRecord, PANEL_COLUMNS};
use crate::stats::{norm_cdf, norm_quantile};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("sigma is not positive semi-definite (smallest eigenvalue {0})")]
    NotPsd(f64),
    #[error("quantile {0} outside (0, 1)")]
    QuantileOutOfRange(f64),
    #[error("agent {agent} cannot afford any plan")]
    InfeasibleAgent { agent: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Distribution of one covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateDist {
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
    Uniform { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub dist: CovariateDist,
}

/// Premium-like instrument: a cluster-level draw plus individual noise,
/// `premium_mean + cluster_sd·ξ_g + noise_sd·ε_i`, and an optional binary
/// supplementary-insurance instrument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentSpec {
    #[serde(default = "default_premium_name")]
    pub premium_name: String,
    pub premium_mean: f64,
    pub cluster_sd: f64,
    pub noise_sd: f64,
    /// `None` drops the binary instrument.
    #[serde(default)]
    pub suppl_prob: Option<f64>,
}

fn default_premium_name() -> String {
    "premium".to_string()
}

fn default_clusters() -> usize {
    26
}

/// Roy data-generating process. `psi` is ordered
/// `[intercept, premium, suppl (if any), covariates…]`; `sigma` is the
/// covariance of `(ω⁰, ω¹, V)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n_agents: usize,
    #[serde(default = "default_clusters")]
    pub n_clusters: usize,
    pub seed: u64,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    pub instruments: InstrumentSpec,
    pub psi: Vec<f64>,
    pub alpha0: f64,
    pub alpha1: f64,
    #[serde(default)]
    pub beta0: Vec<f64>,
    #[serde(default)]
    pub beta1: Vec<f64>,
    pub sigma: [[f64; 3]; 3],
}

impl DgpConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| SynthError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn n_instruments(&self) -> usize {
        1 + usize::from(self.instruments.suppl_prob.is_some())
    }

    pub fn instrument_names(&self) -> Vec<String> {
        let mut names = vec![self.instruments.premium_name.clone()];
        if self.instruments.suppl_prob.is_some() {
            names.push("suppl_ins".to_string());
        }
        names
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SynthError::InvalidConfig(msg));
        if self.n_agents == 0 {
            return bad("n_agents must be at least 1".into());
        }
        if self.n_clusters == 0 {
            return bad("n_clusters must be at least 1".into());
        }
        let k = self.covariates.len();
        let expected_psi = 1 + self.n_instruments() + k;
        if self.psi.len() != expected_psi {
            return bad(format!("psi has {} entries, expected {expected_psi}", self.psi.len()));
        }
        if self.beta0.len() != k || self.beta1.len() != k {
            return bad(format!("beta0/beta1 need {k} entries each"));
        }
        for c in &self.covariates {
            let ok = match c.dist {
                CovariateDist::Normal { sd, .. } => sd >= 0.0,
                CovariateDist::Bernoulli { p } => (0.0..=1.0).contains(&p),
                CovariateDist::Uniform { low, high } => low <= high,
            };
            if !ok {
                return bad(format!("covariate {} has invalid parameters", c.name));
            }
        }
        let mut names: Vec<&str> = vec![EXPORT_OUTCOME, EXPORT_CLUSTER, &self.instruments.premium_name];
        names.extend(self.covariates.iter().map(|c| c.name.as_str()));
        for (j, name) in names.iter().enumerate() {
            if name.is_empty() || PANEL_COLUMNS.contains(name) || names[..j].contains(name) {
                return bad(format!("column name {name:?} is empty, repeated or reserved by the panel schema"));
            }
        }
        let inst = &self.instruments;
        if !(inst.cluster_sd >= 0.0 && inst.noise_sd >= 0.0) {
            return bad("instrument standard deviations must be non-negative".into());
        }
        if inst.suppl_prob.is_some_and(|p| !(0.0..=1.0).contains(&p)) {
            return bad("suppl_prob outside [0, 1]".into());
        }
        let s = &self.sigma;
        for i in 0..3 {
            for j in 0..3 {
                if (s[i][j] - s[j][i]).abs() > 1e-12 {
                    return bad("sigma must be symmetric".into());
                }
            }
        }
        if (s[2][2] - 1.0).abs() > 1e-12 {
            return bad("sigma[2][2] (variance of V) must equal 1".into());
        }
        sigma_factor(&self.sigma).map(|_| ())
    }

    pub fn oracle(&self) -> MteOracle {
        MteOracle {
            delta_intercept: self.alpha1 - self.alpha0,
            delta_beta: self.beta1.iter().zip(&self.beta0).map(|(a, b)| a - b).collect(),
            cov_gap: self.sigma[1][2] - self.sigma[0][2],
        }
    }
}

/// Square-root factor `L` with `L·Lᵀ = Σ`: Cholesky when Σ is positive
/// definite, otherwise from the eigendecomposition.
pub fn sigma_factor(sigma: &[[f64; 3]; 3]) -> Result<Matrix3<f64>> {
    let m = Matrix3::from_fn(|i, j| sigma[i][j]);
    if let Some(ch) = m.cholesky() {
        return Ok(ch.l());
    }
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.min();
    if min < -1e-10 * eig.eigenvalues.amax().max(1.0) {
        return Err(SynthError::NotPsd(min));
    }
    let root = Matrix3::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(eig.eigenvectors * root)
}

/// Potential and observed outcomes of a Roy panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcomes {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPanel {
    pub config: DgpConfig,
    /// `n × k` covariates without intercept.
    pub covariates: DMatrix<f64>,
    /// `n × m` excluded instruments.
    pub instruments: DMatrix<f64>,
    pub clusters: Vec<usize>,
    pub omega0: Vec<f64>,
    pub omega1: Vec<f64>,
    pub v: Vec<f64>,
    pub treated: Vec<bool>,
    /// True propensity `Φ(Zψ)`.
    pub p_true: Vec<f64>,
    pub outcomes: Option<Outcomes>,
}

impl SyntheticPanel {
    pub fn len(&self) -> usize {
        self.treated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treated.is_empty()
    }

    /// Estimation sample with the observed outcome; requires outcomes.
    pub fn estimation_data(&self) -> Result<EstimationData> {
        let outcomes = self
            .outcomes
            .as_ref()
            .ok_or_else(|| SynthError::InvalidConfig("panel has no outcomes; use simulate_roy".into()))?;
        Ok(EstimationData::new(
            DVector::from_vec(outcomes.y.clone()),
            self.treated.clone(),
            self.covariates.clone(),
            self.config.covariate_names(),
            self.instruments.clone(),
            self.config.instrument_names(),
            self.clusters.clone(),
        )?)
    }
}

/// Closed-form MTE parameters of a Roy DGP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MteOracle {
    pub delta_intercept: f64,
    pub delta_beta: Vec<f64>,
    /// `σ₁V − σ₀V`.
    pub cov_gap: f64,
}

impl MteOracle {
    /// `(α¹ − α⁰) + x·Δβ`, the ATE at `x`.
    pub fn ate(&self, x: &[f64]) -> f64 {
        self.delta_intercept + x.iter().zip(&self.delta_beta).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// `MTE(x, u) = (α¹ − α⁰) + x·Δβ + (σ₁V − σ₀V)·Φ⁻¹(u)`.
pub fn true_mte(oracle: &MteOracle, x: &[f64], u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(SynthError::QuantileOutOfRange(u));
    }
    if x.len() != oracle.delta_beta.len() {
        return Err(SynthError::InvalidConfig(format!(
            "evaluation point has {} entries, expected {}",
            x.len(),
            oracle.delta_beta.len()
        )));
    }
    Ok(oracle.ate(x) + oracle.cov_gap * norm_quantile(u))
}

/// Draws covariates, instruments, clusters and the latent `(ω⁰, ω¹, V)`;
/// treatment follows from the latent index. Outcomes are left empty.
///
/// Agent `i` belongs to cluster `i mod n_clusters`.
pub fn draw_population(config: &DgpConfig) -> Result<SyntheticPanel> {
    config.validate()?;
    let factor = sigma_factor(&config.sigma)?;
    let n = config.n_agents;
    let k = config.covariates.len();
    let m = config.n_instruments();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let inst = &config.instruments;
    let cluster_shift: Vec<f64> =
        (0..config.n_clusters).map(|_| inst.cluster_sd * rng.sample::<f64, _>(StandardNormal)).collect();

    let mut covariates = DMatrix::zeros(n, k);
    let mut instruments = DMatrix::zeros(n, m);
    let mut clusters = Vec::with_capacity(n);
    let (mut omega0, mut omega1, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut treated = Vec::with_capacity(n);
    let mut p_true = Vec::with_capacity(n);
    for i in 0..n {
        let g = i % config.n_clusters;
        clusters.push(g);
        for (j, spec) in config.covariates.iter().enumerate() {
            covariates[(i, j)] = match spec.dist {
                CovariateDist::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
                CovariateDist::Bernoulli { p } => f64::from(u8::from(rng.random::<f64>() < p)),
                CovariateDist::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            };
        }
        instruments[(i, 0)] =
            inst.premium_mean + cluster_shift[g] + inst.noise_sd * rng.sample::<f64, _>(StandardNormal);
        if let Some(p) = inst.suppl_prob {
            instruments[(i, 1)] = f64::from(u8::from(rng.random::<f64>() < p));
        }
        let e = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let latent = factor * e;
        omega0.push(latent[0]);
        omega1.push(latent[1]);
        v.push(latent[2]);

        let mut index = config.psi[0];
        for j in 0..m {
            index += config.psi[1 + j] * instruments[(i, j)];
        }
        for j in 0..k {
            index += config.psi[1 + m + j] * covariates[(i, j)];
        }
        treated.push(index - latent[2] > 0.0);
        p_true.push(norm_cdf(index));
    }
    Ok(SyntheticPanel {
        config: config.clone(),
        covariates,
        instruments,
        clusters,
        omega0,
        omega1,
        v,
        treated,
        p_true,
        outcomes: None,
    })
}

/// Roy panel with outcomes, plus its MTE oracle.
pub fn simulate_roy(config: &DgpConfig) -> Result<(SyntheticPanel, MteOracle)> {
    let mut panel = draw_population(config)?;
    let n = panel.len();
    let k = config.covariates.len();
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let (mut a, mut b) = (config.alpha0 + panel.omega0[i], config.alpha1 + panel.omega1[i]);
        for j in 0..k {
            a += config.beta0[j] * panel.covariates[(i, j)];
            b += config.beta1[j] * panel.covariates[(i, j)];
        }
        y0.push(a);
        y1.push(b);
        y.push(if panel.treated[i] { b } else { a });
    }
    panel.outcomes = Some(Outcomes { y0, y1, y });
    Ok((panel, config.oracle()))
}

/// Plan offered in a cluster: deductible and annual premium.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PricedPlan {
    pub deductible: Deductible,
    pub annual_premium: Chf,
}

/// One simulated insuree of the structural model.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralRecord {
    pub prefs: AgentPreferences,
    pub cluster: usize,
    pub plan: usize,
    pub deductible: Deductible,
    pub annual_premium: Chf,
    /// Marginal price at the agent's expected need under the chosen plan.
    pub copay: f64,
    pub high_need: bool,
    pub utilization: f64,
    pub visits: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralPanel {
    pub menus: Vec<Vec<PricedPlan>>,
    pub records: Vec<StructuralRecord>,
}

/// Structural simulation: each agent faces the menu of their cluster,
/// evaluates every plan at the co-payment `marginal_price(E[λ], d)`,
/// picks the best plan by [`choose_plan`], draws high need with
/// probability `p_high`, uses `m* = ω(1 − c) + λ` and records
/// `max(1, Poisson(visits_per_unit·m*))` visits.
pub fn simulate_structural(
    agents: &[AgentPreferences],
    clusters: &[usize],
    menus: &[Vec<PricedPlan>],
    visits_per_unit: f64,
    seed: u64,
) -> Result<StructuralPanel> {
    if agents.len() != clusters.len() {
        return Err(SynthError::InvalidConfig("one cluster id per agent required".into()));
    }
    if !(visits_per_unit > 0.0) {
        return Err(SynthError::InvalidConfig("visits_per_unit must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(agents.len());
    for (agent, (prefs, &g)) in agents.iter().zip(clusters).enumerate() {
        prefs.validate()?;
        let menu = menus
            .get(g)
            .ok_or_else(|| SynthError::InvalidConfig(format!("agent {agent} references missing cluster {g}")))?;
        let expected_spend = Chf::from_f64(prefs.expected_need());
        let entries: Vec<MenuEntry> = menu
            .iter()
            .map(|plan| {
                Ok(MenuEntry {
                    copay: marginal_price(expected_spend, plan.deductible)?,
                    premium: plan.annual_premium.as_f64(),
                })
            })
            .collect::<Result<_>>()?;
        let plan = match choose_plan(prefs, &entries) {
            Ok(i) => i,
            Err(ModelError::NoFeasiblePlan) => return Err(SynthError::InfeasibleAgent { agent }),
            Err(e) => return Err(e.into()),
        };
        let copay = entries[plan].copay;
        let high_need = rng.random::<f64>() < prefs.p_high;
        let lambda = if high_need { prefs.lambda_high } else { prefs.lambda_low };
        let utilization = optimal_utilization(prefs.omega, copay, lambda)?;
        let mean = visits_per_unit * utilization.max(0.0);
        let draw = if mean > 0.0 { Poisson::new(mean).expect("positive mean").sample(&mut rng) as u64 } else { 0 };
        records.push(StructuralRecord {
            prefs: *prefs,
            cluster: g,
            plan,
            deductible: menu[plan].deductible,
            annual_premium: menu[plan].annual_premium,
            copay,
            high_need,
            utilization,
            visits: draw.max(1),
        });
    }
    Ok(StructuralPanel { menus: menus.to_vec(), records })
}

/// Extra panel column holding the continuous Roy outcome.
pub const EXPORT_OUTCOME: &str = "y";
/// Extra panel column holding the cluster id.
pub const EXPORT_CLUSTER: &str = "cluster";
/// Years written by [`export_roy_panel`]; the first is a lag source only.
pub const EXPORT_YEARS: [i32; 2] = [2018, 2019];

/// Writes a Roy panel in the pipeline schema. Each agent gets two identical
/// person-years ([`EXPORT_YEARS`]) so that lags exist and the agent is
/// stable. `D = 1` maps to the 300 CHF deductible and `D = 0` to 2500 CHF,
/// so the lowest treatment side reproduces `D`. The supplementary
/// instrument, if any, fills `suppl_ins`. Extra columns are `y`, the
/// covariates, the premium instrument and `cluster`. Demographics are fixed
/// placeholders and `visits = clamp(round(exp(y)), 1, 365)`.
pub fn export_roy_panel(panel: &SyntheticPanel) -> Result<Panel> {
    let outcomes = panel
        .outcomes
        .as_ref()
        .ok_or_else(|| SynthError::InvalidConfig("panel has no outcomes; use simulate_roy".into()))?;
    let config = &panel.config;
    let mut extra_columns = vec![EXPORT_OUTCOME.to_string()];
    extra_columns.extend(config.covariate_names());
    extra_columns.push(config.instruments.premium_name.clone());
    extra_columns.push(EXPORT_CLUSTER.to_string());
    let k = config.covariates.len();
    let mut records = Vec::with_capacity(2 * panel.len());
    for i in 0..panel.len() {
        let mut extra = vec![outcomes.y[i]];
        extra.extend((0..k).map(|j| panel.covariates[(i, j)]));
        extra.push(panel.instruments[(i, 0)]);
        extra.push(panel.clusters[i] as f64);
        let visits = outcomes.y[i].exp().round().clamp(1.0, 365.0) as u32;
        for (t, &year) in EXPORT_YEARS.iter().enumerate() {
            records.push(PanelRecord {
                person_id: i as u64 + 1,
                year,
                canton: Canton::from_index(panel.clusters[i] % Canton::COUNT).expect("index below 26"),
                age: 40 + t as u32,
                gender: 1 + (i % 2) as u8,
                educ_years: 12.0,
                hh_size: 2,
                income_pm: 4000.0,
                employment: Employment::Active,
                subsidy: false,
                suppl_ins: config.instruments.suppl_prob.is_some() && panel.instruments[(i, 1)] > 0.5,
                deductible: if panel.treated[i] { Deductible::LOWEST } else { Deductible::HIGHEST },
                plan_type: PlanType::Free,
                visits,
                self_health: 2,
                illness: false,
                chronic: false,
                smoke: false,
                phys_act: true,
                med_need: 0,
                extra: extra.clone(),
            });
        }
    }
    Ok(Panel { extra_columns, records })
}
