//! Two-period model of coverage choice under moral hazard.
//!
//! Period 2: the agent observes their need `λ` and picks care spending `m`
//! under quadratic health utility and linear money utility. Period 1: the
//! agent picks a co-payment rate `c` maximizing expected log money, anticipating
//! the period-2 response `m* = ω(1−c) + λ`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("moral-hazard coefficient must be positive, got {0}")]
    NonPositiveOmega(f64),
    #[error("co-payment rate {0} outside [0, 1]")]
    CopayOutOfRange(f64),
    #[error("invalid preferences: {0}")]
    InvalidPreferences(String),
    #[error("invalid tariff: {0}")]
    InvalidTariff(String),
    #[error("agent bankrupt at co-payment {c}: money argument {argument} is not positive")]
    Bankrupt { c: f64, argument: f64 },
    #[error("expected utility undefined on all of [0, 1]")]
    NoFeasibleCopay,
    #[error("plan menu is empty")]
    EmptyMenu,
    #[error("no plan in the menu is affordable")]
    NoFeasiblePlan,
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Structural parameters of one agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentPreferences {
    pub omega: f64,
    pub lambda_high: f64,
    pub lambda_low: f64,
    pub p_high: f64,
    pub income: f64,
}

impl AgentPreferences {
    pub fn new(omega: f64, lambda_high: f64, lambda_low: f64, p_high: f64, income: f64) -> Result<Self> {
        let prefs = Self { omega, lambda_high, lambda_low, p_high, income };
        prefs.validate()?;
        Ok(prefs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) {
            return Err(ModelError::NonPositiveOmega(self.omega));
        }
        if !(self.lambda_low >= 0.0 && self.lambda_high > self.lambda_low) {
            return Err(ModelError::InvalidPreferences(format!(
                "need levels must satisfy lambda_high > lambda_low >= 0 (got {}, {})",
                self.lambda_high, self.lambda_low
            )));
        }
        if !(0.0..=1.0).contains(&self.p_high) {
            return Err(ModelError::InvalidPreferences(format!("p_high {} outside [0, 1]", self.p_high)));
        }
        if !(self.income > 0.0) {
            return Err(ModelError::InvalidPreferences(format!("income {} must be positive", self.income)));
        }
        Ok(())
    }

    pub fn expected_need(&self) -> f64 {
        self.p_high * self.lambda_high + (1.0 - self.p_high) * self.lambda_low
    }
}

/// Premium as an affine function of the coverage share `1 − c`:
/// `π(1−c) = base + slope·(1−c)`, so `π′ = slope`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearTariff {
    pub base: f64,
    pub slope: f64,
}

impl LinearTariff {
    pub fn new(base: f64, slope: f64) -> Result<Self> {
        if !(base >= 0.0) {
            return Err(ModelError::InvalidTariff(format!("base {base} must be non-negative")));
        }
        if base + slope < 0.0 {
            return Err(ModelError::InvalidTariff(format!(
                "premium at full coverage {} is negative",
                base + slope
            )));
        }
        Ok(Self { base, slope })
    }

    /// Flat premium, independent of coverage.
    pub fn flat(premium: f64) -> Result<Self> {
        Self::new(premium, 0.0)
    }

    /// Premium charged at co-payment rate `c`.
    pub fn premium(&self, c: f64) -> f64 {
        self.base + self.slope * (1.0 - c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilitySnapshot {
    pub health_component: f64,
    pub money_component: f64,
    pub total: f64,
}

fn check_omega(omega: f64) -> Result<()> {
    if omega > 0.0 {
        Ok(())
    } else {
        Err(ModelError::NonPositiveOmega(omega))
    }
}

fn check_copay(c: f64) -> Result<()> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(ModelError::CopayOutOfRange(c))
    }
}

/// Health utility `(m−λ) − (m−λ)²/(2ω)`; peaks at `m − λ = ω`.
pub fn health_utility(m: f64, lambda: f64, omega: f64) -> Result<f64> {
    check_omega(omega)?;
    let net = m - lambda;
    Ok(net - net * net / (2.0 * omega))
}

/// Money utility `y − c·m − π(1−c)`.
pub fn money_utility(m: f64, c: f64, tariff: &LinearTariff, income: f64) -> Result<f64> {
    check_copay(c)?;
    Ok(income - c * m - tariff.premium(c))
}

pub fn period2_utility(
    m: f64,
    prefs: &AgentPreferences,
    lambda_realized: f64,
    c: f64,
    tariff: &LinearTariff,
) -> Result<UtilitySnapshot> {
    let health = health_utility(m, lambda_realized, prefs.omega)?;
    let money = money_utility(m, c, tariff, prefs.income)?;
    Ok(UtilitySnapshot { health_component: health, money_component: money, total: health + money })
}

/// Period-2 optimal care spending `m* = ω(1−c) + λ`.
pub fn optimal_utilization(omega: f64, c: f64, lambda_realized: f64) -> Result<f64> {
    check_omega(omega)?;
    check_copay(c)?;
    Ok(omega * (1.0 - c) + lambda_realized)
}

// Expected log money with a given premium; no range checks on `c` so that
// finite differences can straddle the bounds.
fn expected_log_money(c: f64, premium: f64, prefs: &AgentPreferences) -> Result<f64> {
    let state = |lambda: f64| -> Result<f64> {
        let spend = prefs.omega * (1.0 - c) + lambda;
        let argument = prefs.income - c * spend - premium;
        if argument > 0.0 {
            Ok(argument.ln())
        } else {
            Err(ModelError::Bankrupt { c, argument })
        }
    };
    let p = prefs.p_high;
    // Degenerate probabilities collapse to a single state; the other state
    // need not be solvent.
    if p == 1.0 {
        return state(prefs.lambda_high);
    }
    if p == 0.0 {
        return state(prefs.lambda_low);
    }
    Ok(p * state(prefs.lambda_high)? + (1.0 - p) * state(prefs.lambda_low)?)
}

/// Period-1 expected utility
/// `p·ln[y − c(ω(1−c)+λᴴ) − π(1−c)] + (1−p)·ln[y − c(ω(1−c)+λᴸ) − π(1−c)]`.
pub fn expected_period1_utility(c: f64, prefs: &AgentPreferences, tariff: &LinearTariff) -> Result<f64> {
    check_copay(c)?;
    expected_log_money(c, tariff.premium(c), prefs)
}

/// Which bound, if any, the closed-form co-payment was clamped to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CopaymentChoice {
    /// Rate in [0, 1].
    pub rate: f64,
    /// Closed-form value before clamping.
    pub unclamped: f64,
    pub boundary: Option<Boundary>,
}

/// Closed-form co-payment `c* = ½ + (E[λ] − π′)/(2ω)`, clamped to [0, 1].
///
/// `c*` is the root of [`linearized_foc`], the first-order condition of the
/// expected money term. Under log utility the exact residual
/// ([`foc_residual`]) at `c*` is `−p(1−p)(λᴴ−λᴸ)²c*/(Aᴴ·Aᴸ)`, which is small
/// whenever the stakes are small relative to income.
pub fn optimal_copayment(prefs: &AgentPreferences, tariff: &LinearTariff) -> Result<CopaymentChoice> {
    prefs.validate()?;
    let feasible = (0..=1000).any(|i| expected_period1_utility(i as f64 / 1000.0, prefs, tariff).is_ok());
    if !feasible {
        return Err(ModelError::NoFeasibleCopay);
    }
    let unclamped = 0.5 + (prefs.expected_need() - tariff.slope) / (2.0 * prefs.omega);
    let (rate, boundary) = if unclamped < 0.0 {
        (0.0, Some(Boundary::Lower))
    } else if unclamped > 1.0 {
        (1.0, Some(Boundary::Upper))
    } else {
        (unclamped, None)
    };
    Ok(CopaymentChoice { rate, unclamped, boundary })
}

/// Analytic derivative of expected money `E[y − c·m*(λ) − π(1−c)]` in `c`:
/// `2ωc − ω − E[λ] + π′`. Its root is the closed-form co-payment.
pub fn linearized_foc(c: f64, prefs: &AgentPreferences, tariff: &LinearTariff) -> f64 {
    2.0 * prefs.omega * c - prefs.omega - prefs.expected_need() + tariff.slope
}

pub const FOC_STEP: f64 = 1e-6;

/// Central-difference derivative of [`expected_period1_utility`] at `c`.
pub fn foc_residual(c: f64, prefs: &AgentPreferences, tariff: &LinearTariff) -> Result<f64> {
    check_copay(c)?;
    let hi = expected_log_money(c + FOC_STEP, tariff.premium(c + FOC_STEP), prefs)?;
    let lo = expected_log_money(c - FOC_STEP, tariff.premium(c - FOC_STEP), prefs)?;
    Ok((hi - lo) / (2.0 * FOC_STEP))
}

/// One plan as seen by the agent: effective co-payment rate and premium.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MenuEntry {
    pub copay: f64,
    pub premium: f64,
}

/// Expected log money of one menu entry.
pub fn menu_entry_utility(prefs: &AgentPreferences, entry: &MenuEntry) -> Result<f64> {
    check_copay(entry.copay)?;
    expected_log_money(entry.copay, entry.premium, prefs)
}

/// Index of the plan with the highest expected utility. Ties go to the
/// lowest co-payment rate, then to the earlier entry.
pub fn choose_plan(prefs: &AgentPreferences, menu: &[MenuEntry]) -> Result<usize> {
    if menu.is_empty() {
        return Err(ModelError::EmptyMenu);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, entry) in menu.iter().enumerate() {
        let u = match menu_entry_utility(prefs, entry) {
            Ok(u) => u,
            Err(ModelError::Bankrupt { .. }) => continue,
            Err(e) => return Err(e),
        };
        best = match best {
            None => Some((i, u)),
            Some((j, v)) if u > v || (u == v && entry.copay < menu[j].copay) => Some((i, u)),
            keep => keep,
        };
    }
    best.map(|(i, _)| i).ok_or(ModelError::NoFeasiblePlan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn prefs() -> AgentPreferences {
        AgentPreferences::new(2.0, 2.0, 0.0, 0.5, 20.0).unwrap()
    }

    #[test]
    fn health_utility_values() {
        assert_eq!(health_utility(5.0, 5.0, 2.0).unwrap(), 0.0);
        assert_eq!(health_utility(7.0, 5.0, 2.0).unwrap(), 1.0);
        assert!(matches!(health_utility(1.0, 0.0, 0.0), Err(ModelError::NonPositiveOmega(_))));
    }

    #[test]
    fn health_utility_argmax_on_grid() {
        for &(lambda, omega) in &[(0.0, 1.0), (3.0, 0.5), (1.5, 4.0)] {
            let (best_m, _) = (0..=20000)
                .map(|i| i as f64 * 1e-3)
                .map(|m| (m, health_utility(m, lambda, omega).unwrap()))
                .fold((0.0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            assert!((best_m - (lambda + omega)).abs() < 1.5e-3, "{best_m} vs {}", lambda + omega);
        }
    }

    #[test]
    fn money_utility_values() {
        let zero = LinearTariff::new(0.0, 0.0).unwrap();
        assert_eq!(money_utility(0.0, 0.0, &zero, 10.0).unwrap(), 10.0);
        let t = LinearTariff::new(1.0, 2.0).unwrap();
        assert_eq!(money_utility(4.0, 0.5, &t, 10.0).unwrap(), 6.0);
        for m in [0.0, 1.0, 7.5] {
            assert_eq!(money_utility(m, 1.0, &LinearTariff::new(3.0, 0.0).unwrap(), 10.0).unwrap(), 10.0 - m - 3.0);
        }
        assert!(matches!(money_utility(1.0, 1.2, &t, 10.0), Err(ModelError::CopayOutOfRange(_))));
    }

    #[test]
    fn period2_total_is_sum_and_m_star_is_grid_max() {
        let p = prefs();
        let t = LinearTariff::new(1.0, -0.5).unwrap();
        let s = period2_utility(3.3, &p, 2.0, 0.4, &t).unwrap();
        assert_eq!(s.total, s.health_component + s.money_component);
        for &c in &[0.0, 0.3, 0.8] {
            let m_star = optimal_utilization(p.omega, c, 2.0).unwrap();
            let grid_best = (0..=10000)
                .map(|i| i as f64 * 1e-3)
                .map(|m| period2_utility(m, &p, 2.0, c, &t).unwrap().total)
                .fold(f64::NEG_INFINITY, f64::max);
            let at_star = period2_utility(m_star, &p, 2.0, c, &t).unwrap().total;
            assert!(at_star >= grid_best - 1e-12);
        }
        // omega -> 0 with full coverage: spending approaches need
        assert!((optimal_utilization(1e-9, 0.0, 2.0).unwrap() - 2.0).abs() < 1e-8);
    }

    #[test]
    fn optimal_utilization_values() {
        assert_eq!(optimal_utilization(3.0, 1.0, 1.5).unwrap(), 1.5);
        assert_eq!(optimal_utilization(2.0, 0.5, 1.0).unwrap(), 2.0);
        assert_eq!(optimal_utilization(2.0, 0.0, 1.0).unwrap(), 3.0);
    }

    #[test]
    fn expected_utility_degenerate_cases() {
        let t = LinearTariff::new(1.0, -0.5).unwrap();
        let mut p = prefs();
        p.p_high = 1.0;
        let c = 0.3;
        let direct = (p.income - c * (p.omega * (1.0 - c) + p.lambda_high) - t.premium(c)).ln();
        assert!((expected_period1_utility(c, &p, &t).unwrap() - direct).abs() < 1e-15);
        p.p_high = 0.0;
        let direct = (p.income - c * (p.omega * (1.0 - c) + p.lambda_low) - t.premium(c)).ln();
        assert!((expected_period1_utility(c, &p, &t).unwrap() - direct).abs() < 1e-15);
        // zero co-payment: ln(y − π(1)) whatever the need
        for omega in [0.5, 3.0] {
            let q = AgentPreferences::new(omega, 5.0, 1.0, 0.3, 20.0).unwrap();
            let u = expected_period1_utility(0.0, &q, &t).unwrap();
            assert!((u - (20.0f64 - t.premium(0.0)).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn bankrupt_is_a_domain_error() {
        let p = AgentPreferences::new(2.0, 30.0, 0.0, 0.5, 20.0).unwrap();
        let t = LinearTariff::new(1.0, 0.0).unwrap();
        assert!(matches!(expected_period1_utility(1.0, &p, &t), Err(ModelError::Bankrupt { .. })));
    }

    #[test]
    fn closed_form_limits() {
        let t = LinearTariff::new(1.0, 0.0).unwrap();
        let p = AgentPreferences::new(2.0, 1e-12, 0.0, 0.0, 20.0).unwrap();
        assert_eq!(optimal_copayment(&p, &t).unwrap().rate, 0.5);
        let big = AgentPreferences::new(1e9, 2.0, 1.0, 0.5, 20.0).unwrap();
        assert!((optimal_copayment(&big, &LinearTariff::new(1.0, -0.5).unwrap()).unwrap().rate - 0.5).abs() < 1e-8);
    }

    #[test]
    fn clamped_at_upper_bound() {
        // omega=2, E[λ]=1, slope=−1 → ½ + ¼·2 = 1
        let p = prefs();
        let t = LinearTariff::new(2.0, -1.0).unwrap();
        let choice = optimal_copayment(&p, &t).unwrap();
        assert_eq!(choice.unclamped, 1.0);
        assert_eq!(choice.rate, 1.0);
        // the stationary point sits exactly on the bound: first-order
        // condition of expected money vanishes there
        assert_eq!(linearized_foc(1.0, &p, &t), 0.0);
        let mut q = p;
        q.lambda_high = 4.0; // E[λ]=2 → unclamped 1.25
        let choice = optimal_copayment(&q, &t).unwrap();
        assert_eq!(choice.boundary, Some(Boundary::Upper));
        assert!(foc_residual(1.0, &q, &t).unwrap().abs() > 1e-3);
        // at the clamped bound the residual points toward the unclamped
        // stationary point's basin: objective still falling at c = 1
        assert!(foc_residual(1.0, &q, &t).unwrap() < 0.0);
    }

    #[test]
    fn stationary_point_matches_grid_and_is_a_minimum() {
        // Large income relative to needs: log objective ≈ linear in money.
        let p = AgentPreferences::new(2.0, 1.0, 0.2, 0.4, 200.0).unwrap();
        let t = LinearTariff::new(1.0, 0.5).unwrap();
        let c_star = optimal_copayment(&p, &t).unwrap().rate;
        assert!(c_star > 0.0 && c_star < 1.0);
        let grid: Vec<(f64, f64)> =
            (0..=10000).map(|i| i as f64 * 1e-4).map(|c| (c, expected_period1_utility(c, &p, &t).unwrap())).collect();
        let interior_extremum = grid
            .windows(3)
            .find(|w| (w[1].1 - w[0].1).signum() != (w[2].1 - w[1].1).signum())
            .map(|w| w[1].0)
            .unwrap();
        assert!((interior_extremum - c_star).abs() < 2e-4);
        let at_star = expected_period1_utility(c_star, &p, &t).unwrap();
        assert!(grid.iter().all(|&(_, u)| u >= at_star - 1e-9));
        // residual signs flip across the stationary point
        let lo = foc_residual(c_star - 1e-3, &p, &t).unwrap();
        let hi = foc_residual(c_star + 1e-3, &p, &t).unwrap();
        assert!(lo * hi < 0.0);
        assert!(foc_residual(c_star, &p, &t).unwrap().abs() < 1e-4);
        assert!(linearized_foc(c_star, &p, &t).abs() < 1e-12);
    }

    #[test]
    fn choose_plan_basics() {
        let p = prefs();
        let one = [MenuEntry { copay: 0.3, premium: 2.0 }];
        assert_eq!(choose_plan(&p, &one).unwrap(), 0);
        assert!(matches!(choose_plan(&p, &[]), Err(ModelError::EmptyMenu)));
        let broke = [MenuEntry { copay: 1.0, premium: 100.0 }];
        assert!(matches!(choose_plan(&p, &broke), Err(ModelError::NoFeasiblePlan)));
        // same premium, higher co-payment: never chosen
        let menu = [MenuEntry { copay: 0.9, premium: 2.0 }, MenuEntry { copay: 0.1, premium: 2.0 }];
        assert_eq!(choose_plan(&p, &menu).unwrap(), 1);
        // ties go to the lower co-payment
        let tie = [MenuEntry { copay: 0.0, premium: 2.0 }, MenuEntry { copay: 0.0, premium: 2.0 }];
        assert_eq!(choose_plan(&p, &tie).unwrap(), 0);
    }

    #[test]
    fn choose_plan_matches_exhaustive_evaluation() {
        let p = AgentPreferences::new(800.0, 6000.0, 300.0, 0.2, 60000.0).unwrap();
        let copays = [0.1, 0.1, 0.1, 1.0, 1.0, 1.0];
        let premiums = [4800.0, 4560.0, 4080.0, 3600.0, 3120.0, 2640.0];
        let menu: Vec<MenuEntry> =
            copays.iter().zip(premiums).map(|(&copay, premium)| MenuEntry { copay, premium }).collect();
        let oracle = (0..menu.len())
            .map(|i| {
                let e = menu[i];
                let u = |l: f64| (p.income - e.copay * (p.omega * (1.0 - e.copay) + l) - e.premium).ln();
                (i, p.p_high * u(p.lambda_high) + (1.0 - p.p_high) * u(p.lambda_low))
            })
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
            .0;
        assert_eq!(choose_plan(&p, &menu).unwrap(), oracle);
    }

    fn arb_prefs() -> impl Strategy<Value = AgentPreferences> {
        (0.2f64..5.0, 0.0f64..2.0, 0.05f64..2.0, 0.0f64..1.0, 50.0f64..200.0).prop_map(|(omega, low, gap, p, y)| {
            AgentPreferences::new(omega, low + gap, low, p, y).unwrap()
        })
    }

    proptest! {
        #[test]
        fn utilization_monotone(omega in 0.1f64..10.0, c in 0.0f64..0.99, lambda in 0.0f64..5.0, dc in 0.001f64..0.01) {
            let base = optimal_utilization(omega, c, lambda).unwrap();
            prop_assert!(optimal_utilization(omega, c + dc, lambda).unwrap() < base);
            prop_assert!(optimal_utilization(omega * 1.1, c, lambda).unwrap() > base);
            prop_assert!(optimal_utilization(omega, c, lambda + 0.1).unwrap() > base);
        }

        #[test]
        fn copay_decreasing_in_omega_when_bracket_positive(p in arb_prefs(), slope in -1.0f64..0.0) {
            let t = LinearTariff::new(2.0, slope).unwrap();
            let a = optimal_copayment(&p, &t).unwrap();
            let mut q = p;
            q.omega *= 1.2;
            let b = optimal_copayment(&q, &t).unwrap();
            if a.boundary.is_none() && b.boundary.is_none() {
                prop_assert!(b.rate < a.rate);
            }
        }

        #[test]
        fn copay_increasing_in_expected_need(p in arb_prefs(), slope in -1.0f64..1.0) {
            let t = LinearTariff::new(2.0, slope).unwrap();
            let a = optimal_copayment(&p, &t).unwrap();
            let mut q = p;
            q.lambda_high += 0.1;
            let b = optimal_copayment(&q, &t).unwrap();
            if a.boundary.is_none() && b.boundary.is_none() {
                prop_assert!(b.rate > a.rate);
            }
        }

        #[test]
        fn dominated_plan_does_not_change_choice(p in arb_prefs(), c1 in 0.0f64..1.0, c2 in 0.0f64..1.0, pr1 in 0.0f64..5.0, pr2 in 0.0f64..5.0, extra in 0.01f64..0.5) {
            let menu = vec![MenuEntry { copay: c1, premium: pr1 }, MenuEntry { copay: c2, premium: pr2 }];
            let chosen = choose_plan(&p, &menu).unwrap();
            // same rate, dearer premium: worse in every need state
            let dominated = MenuEntry { copay: c1, premium: pr1 + extra };
            let mut bigger = menu.clone();
            bigger.push(dominated);
            prop_assert_eq!(choose_plan(&p, &bigger).unwrap(), chosen);
        }

        #[test]
        fn linearized_foc_zero_at_interior_solution(p in arb_prefs(), slope in -1.0f64..1.0) {
            let t = LinearTariff::new(2.0, slope).unwrap();
            let choice = optimal_copayment(&p, &t).unwrap();
            if choice.boundary.is_none() {
                prop_assert!(linearized_foc(choice.rate, &p, &t).abs() < 1e-8);
            }
        }
    }
}
