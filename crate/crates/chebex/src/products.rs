//! Product definitions: payoffs `g(t, x)`, dynamic-programming combine
//! rules and exercise/monitoring schedules.
//!
//! Payoffs are expressed in risk-factor coordinates: `x = ln(S_t / S_0)`
//! for equity products and the OU state `x_t` for the swaption. Exercised
//! or knocked-out products are cash settled, so they carry no credit
//! exposure after the event.

use crate::error::CoreError;
use crate::models::{hw_zcb, HullWhiteParams, TimeGrid};

/// Date-matching tolerance when locating schedule dates on a grid.
pub const DATE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OptionKind {
    Call,
    Put,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SwaptionSide {
    Payer,
    Receiver,
}

/// Market data a payoff needs beyond the risk factor itself.
#[derive(Debug, Clone, Copy)]
pub enum PayoffContext {
    /// Equity products: the initial spot fixing the log-return scale.
    Equity { s0: f64 },
    /// Rates products: Hull-White parameters backing the ZCB formula.
    Rates { hw: HullWhiteParams },
}

impl PayoffContext {
    pub fn s0(&self) -> Result<f64, CoreError> {
        match self {
            PayoffContext::Equity { s0 } => Ok(*s0),
            PayoffContext::Rates { .. } => Err(CoreError::Config(
                "equity payoff requested under a rates context".into(),
            )),
        }
    }

    pub fn hw(&self) -> Result<&HullWhiteParams, CoreError> {
        match self {
            PayoffContext::Rates { hw } => Ok(hw),
            PayoffContext::Equity { .. } => Err(CoreError::Config(
                "swaption payoff requested under an equity context".into(),
            )),
        }
    }
}

/// One of the four supported product shapes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ProductSpec {
    European {
        kind: OptionKind,
        strike: f64,
        maturity: f64,
    },
    Bermudan {
        kind: OptionKind,
        strike: f64,
        maturity: f64,
        exercise_dates: Vec<f64>,
    },
    BarrierUpOut {
        kind: OptionKind,
        strike: f64,
        barrier: f64,
        maturity: f64,
        monitoring_dates: Vec<f64>,
    },
    BermudanSwaption {
        side: SwaptionSide,
        fixed_rate: f64,
        notional: f64,
        exercise_dates: Vec<f64>,
        payment_dates: Vec<f64>,
    },
}

/// Role of a grid date in the dynamic program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRole {
    /// Early exercise allowed (take the max with intrinsic).
    Decision,
    /// Barrier monitoring (knock out above the log-barrier).
    Monitoring,
    /// Plain continuation date.
    Plain,
}

impl ProductSpec {
    pub fn maturity(&self) -> f64 {
        match self {
            ProductSpec::European { maturity, .. } => *maturity,
            ProductSpec::Bermudan { maturity, .. } => *maturity,
            ProductSpec::BarrierUpOut { maturity, .. } => *maturity,
            ProductSpec::BermudanSwaption { exercise_dates, .. } => {
                *exercise_dates.last().unwrap_or(&0.0)
            }
        }
    }

    pub fn is_equity(&self) -> bool {
        !matches!(self, ProductSpec::BermudanSwaption { .. })
    }

    /// Log-barrier `ln(B / S0)` for barrier products.
    pub fn log_barrier(&self, s0: f64) -> Option<f64> {
        match self {
            ProductSpec::BarrierUpOut { barrier, .. } => Some((barrier / s0).ln()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let check_dates = |dates: &[f64], maturity: f64, label: &str| {
            if dates.is_empty() {
                return Err(CoreError::Schedule(format!("{label} dates are empty")));
            }
            if dates.windows(2).any(|w| w[1] <= w[0]) {
                return Err(CoreError::Schedule(format!(
                    "{label} dates must be strictly increasing"
                )));
            }
            if dates.iter().any(|&t| t <= 0.0 || t > maturity + DATE_TOL) {
                return Err(CoreError::Schedule(format!(
                    "{label} dates must lie in (0, maturity]"
                )));
            }
            Ok(())
        };
        match self {
            ProductSpec::European {
                strike, maturity, ..
            } => {
                if *strike <= 0.0 || *maturity <= 0.0 {
                    return Err(CoreError::InvalidParameter(
                        "European option requires strike > 0 and maturity > 0".into(),
                    ));
                }
            }
            ProductSpec::Bermudan {
                strike,
                maturity,
                exercise_dates,
                ..
            } => {
                if *strike <= 0.0 || *maturity <= 0.0 {
                    return Err(CoreError::InvalidParameter(
                        "Bermudan option requires strike > 0 and maturity > 0".into(),
                    ));
                }
                check_dates(exercise_dates, *maturity, "exercise")?;
            }
            ProductSpec::BarrierUpOut {
                kind,
                strike,
                barrier,
                maturity,
                monitoring_dates,
            } => {
                if *strike <= 0.0 || *maturity <= 0.0 {
                    return Err(CoreError::InvalidParameter(
                        "barrier option requires strike > 0 and maturity > 0".into(),
                    ));
                }
                if *kind == OptionKind::Call && barrier <= strike {
                    return Err(CoreError::InvalidParameter(
                        "up-and-out call requires barrier > strike".into(),
                    ));
                }
                check_dates(monitoring_dates, *maturity, "monitoring")?;
            }
            ProductSpec::BermudanSwaption {
                notional,
                exercise_dates,
                payment_dates,
                ..
            } => {
                if *notional <= 0.0 {
                    return Err(CoreError::InvalidParameter(
                        "swaption requires notional > 0".into(),
                    ));
                }
                let last_ex = *exercise_dates.last().unwrap_or(&0.0);
                check_dates(exercise_dates, last_ex, "exercise")?;
                if payment_dates.is_empty()
                    || payment_dates.windows(2).any(|w| w[1] <= w[0])
                    || payment_dates.last().copied().unwrap_or(0.0) <= last_ex
                {
                    return Err(CoreError::Schedule(
                        "swap payments must be increasing and extend past the last exercise"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn decision_dates(&self) -> &[f64] {
        match self {
            ProductSpec::European { .. } => &[],
            ProductSpec::Bermudan { exercise_dates, .. } => exercise_dates,
            ProductSpec::BarrierUpOut {
                monitoring_dates, ..
            } => monitoring_dates,
            ProductSpec::BermudanSwaption { exercise_dates, .. } => exercise_dates,
        }
    }

    /// True when `t` is an exercise (or monitoring) date.
    pub fn is_scheduled_date(&self, t: f64) -> bool {
        self.decision_dates()
            .iter()
            .any(|&d| (d - t).abs() <= DATE_TOL)
    }

    /// Maps every grid index to its dynamic-programming role, verifying
    /// that each scheduled date lies on the grid.
    pub fn schedule_roles(&self, grid: &TimeGrid) -> Result<Vec<StepRole>, CoreError> {
        let role = match self {
            ProductSpec::European { .. } => StepRole::Plain,
            ProductSpec::BarrierUpOut { .. } => StepRole::Monitoring,
            _ => StepRole::Decision,
        };
        let maturity = self.maturity();
        if (grid.times().last().unwrap() - maturity).abs() > DATE_TOL {
            return Err(CoreError::Schedule(format!(
                "grid horizon {} does not end at product maturity {maturity}",
                grid.times().last().unwrap()
            )));
        }
        for &d in self.decision_dates() {
            if !grid.times().iter().any(|&t| (t - d).abs() <= DATE_TOL) {
                return Err(CoreError::Schedule(format!(
                    "scheduled date {d} is not on the time grid"
                )));
            }
        }
        Ok(grid
            .times()
            .iter()
            .map(|&t| {
                if self.is_scheduled_date(t) {
                    role
                } else {
                    StepRole::Plain
                }
            })
            .collect())
    }
}

fn equity_intrinsic(kind: OptionKind, strike: f64, s0: f64, x: f64) -> f64 {
    let s = s0 * x.exp();
    match kind {
        OptionKind::Call => (s - strike).max(0.0),
        OptionKind::Put => (strike - s).max(0.0),
    }
}

/// Value of the underlying swap at exercise time `t` in state `x`,
/// per unit notional: fixed leg minus floating leg for a receiver
/// (`K sum_i P(t, tau_i) + P(t, tau_m) - 1` with yearly accrual).
pub fn swap_value(
    side: SwaptionSide,
    fixed_rate: f64,
    payment_dates: &[f64],
    hw: &HullWhiteParams,
    t: f64,
    x: f64,
) -> Result<f64, CoreError> {
    let remaining: Vec<f64> = payment_dates
        .iter()
        .copied()
        .filter(|&tau| tau > t + DATE_TOL)
        .collect();
    if remaining.is_empty() {
        return Err(CoreError::Schedule(format!(
            "no swap payments remain after exercise at t = {t}"
        )));
    }
    let mut fixed = 0.0;
    for &tau in &remaining {
        fixed += fixed_rate * hw_zcb(x, t, tau, hw)?;
    }
    let receiver = fixed + hw_zcb(x, t, *remaining.last().unwrap(), hw)? - 1.0;
    Ok(match side {
        SwaptionSide::Receiver => receiver,
        SwaptionSide::Payer => -receiver,
    })
}

/// Exercise payoff `g(t, x)`. For products with a schedule, `t` must be an
/// exercise/monitoring date or the maturity.
pub fn payoff(
    product: &ProductSpec,
    ctx: &PayoffContext,
    t: f64,
    x: f64,
) -> Result<f64, CoreError> {
    let on_schedule =
        product.is_scheduled_date(t) || (t - product.maturity()).abs() <= DATE_TOL;
    match product {
        ProductSpec::European {
            kind,
            strike,
            maturity,
        } => {
            if (t - maturity).abs() > DATE_TOL {
                return Err(CoreError::Schedule(
                    "European payoff only applies at maturity".into(),
                ));
            }
            Ok(equity_intrinsic(*kind, *strike, ctx.s0()?, x))
        }
        ProductSpec::Bermudan { kind, strike, .. } => {
            if !on_schedule {
                return Err(CoreError::Schedule(format!(
                    "t = {t} is not an exercise date"
                )));
            }
            Ok(equity_intrinsic(*kind, *strike, ctx.s0()?, x))
        }
        ProductSpec::BarrierUpOut { kind, strike, .. } => {
            if !on_schedule {
                return Err(CoreError::Schedule(format!(
                    "t = {t} is not a monitoring date"
                )));
            }
            Ok(equity_intrinsic(*kind, *strike, ctx.s0()?, x))
        }
        ProductSpec::BermudanSwaption {
            side,
            fixed_rate,
            notional,
            payment_dates,
            ..
        } => {
            if !on_schedule {
                return Err(CoreError::Schedule(format!(
                    "t = {t} is not a swaption exercise date"
                )));
            }
            let swap = swap_value(*side, *fixed_rate, payment_dates, ctx.hw()?, t, x)?;
            Ok(*notional * swap.max(0.0))
        }
    }
}

/// Dynamic-programming combine rule: how intrinsic and the one-step
/// discounted continuation merge at date `t`.
pub fn dp_combine(
    product: &ProductSpec,
    ctx: &PayoffContext,
    t: f64,
    intrinsic: f64,
    continuation: f64,
    x: f64,
) -> Result<f64, CoreError> {
    match product {
        ProductSpec::European { .. } => Ok(continuation),
        ProductSpec::Bermudan { .. } | ProductSpec::BermudanSwaption { .. } => {
            if product.is_scheduled_date(t) {
                Ok(intrinsic.max(continuation))
            } else {
                Ok(continuation)
            }
        }
        ProductSpec::BarrierUpOut { .. } => {
            let b = product.log_barrier(ctx.s0()?).unwrap();
            if product.is_scheduled_date(t) && x > b {
                Ok(0.0)
            } else {
                Ok(continuation)
            }
        }
    }
}

/// Value at maturity: the payoff, with the final barrier monitoring
/// applied for knock-out products.
pub fn terminal_value(
    product: &ProductSpec,
    ctx: &PayoffContext,
    x: f64,
) -> Result<f64, CoreError> {
    let maturity = product.maturity();
    let g = payoff(product, ctx, maturity, x)?;
    match product {
        ProductSpec::BarrierUpOut { .. } => {
            let b = product.log_barrier(ctx.s0()?).unwrap();
            Ok(if x > b { 0.0 } else { g })
        }
        _ => Ok(g),
    }
}
