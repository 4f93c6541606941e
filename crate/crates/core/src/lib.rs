//! Selection on moral hazard in deductible choice.
//!
//! * [`model`]: two-period structural model of utilisation and co-payment choice.
//! * [`market`]: Swiss cost-sharing rule, plan menu and premium data.
//! * [`synthgen`]: Roy-model and structural data generators with known truth.
//! * [`econometrics`]: probit propensity scores, parametric-normal and
//!   semiparametric marginal treatment effect estimators, cluster bootstrap.
//! * [`pipeline`]: raw panel CSV to estimation sample.

pub mod econometrics;
pub mod market;
pub mod model;
pub mod pipeline;
pub mod stats;
pub mod synthgen;
