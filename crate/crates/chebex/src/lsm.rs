//! Least-squares Monte Carlo baseline for exposure profiles.
//!
//! The regression basis is monomials of the normalized risk factor
//! `tau^{-1}(x)` up to a configurable degree, optionally augmented with
//! the product payoff (and, for barrier options, the payoff times the
//! survival indicator). Pricing runs on its own path ensemble; exposure
//! evaluation on a second, independent ensemble, which removes most of
//! the foresight bias. Regressions solve least squares through a thin
//! SVD (rank-revealing; degenerate designs fall back to the minimum-norm
//! solution).

use nalgebra::{DMatrix, DVector};

use crate::engine::{ExposureProfile, ValueSurface};
use crate::error::CoreError;
use crate::models::{Measure, ModelSpec, PathEnsemble};
use crate::products::{payoff, terminal_value, PayoffContext, ProductSpec, StepRole};
use crate::Domain64;

/// LSM configuration.
#[derive(Debug, Clone)]
pub struct LsmConfig {
    /// Highest monomial degree in the regression basis.
    pub degree: usize,
    /// Append the product payoff as a basis function.
    pub include_payoff: bool,
    /// Number of pricing paths (independent of the exposure ensemble).
    pub pricing_paths: usize,
    /// Seed of the pricing ensemble; must differ from the exposure seed.
    pub pricing_seed: u64,
}

impl Default for LsmConfig {
    fn default() -> Self {
        Self {
            degree: 5,
            include_payoff: true,
            pricing_paths: 150_000,
            pricing_seed: 90_210,
        }
    }
}

impl LsmConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.degree < 1 {
            return Err(CoreError::InvalidParameter(
                "lsm.degree must be at least 1".into(),
            ));
        }
        if self.pricing_paths < 100 {
            return Err(CoreError::InvalidParameter(
                "lsm.pricing_paths must be at least 100".into(),
            ));
        }
        Ok(())
    }
}

/// Per-time regression surfaces fitted on the pricing ensemble.
pub struct LsmValueFunctions {
    /// Regression coefficients per grid index (empty when degenerate).
    betas: Vec<Vec<f64>>,
    domain: Domain64,
    product: ProductSpec,
    ctx: PayoffContext,
    roles: Vec<StepRole>,
    times: Vec<f64>,
    n_basis: usize,
    include_payoff: bool,
    log_barrier: Option<f64>,
}

impl LsmValueFunctions {
    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn t0_price(&self) -> f64 {
        // At t = 0 all paths share the initial state: the "surface" is the
        // plain Monte Carlo average stored as the constant coefficient.
        self.betas[0][0]
    }

    fn basis_into(&self, t: f64, x: f64, row: &mut [f64]) {
        let z = self.domain.to_unit(x);
        let mut p = 1.0;
        let monomials = self.n_basis - usize::from(self.include_payoff)
            - usize::from(self.log_barrier.is_some());
        for slot in row.iter_mut().take(monomials) {
            *slot = p;
            p *= z;
        }
        if self.include_payoff {
            let g = payoff(&self.product, &self.ctx, t, x).unwrap_or(0.0);
            row[monomials] = g;
            if let Some(b) = self.log_barrier {
                row[monomials + 1] = if x <= b { g } else { 0.0 };
            }
        } else if let Some(b) = self.log_barrier {
            let g = payoff(&self.product, &self.ctx, t, x).unwrap_or(0.0);
            row[monomials] = if x <= b { g } else { 0.0 };
        }
    }

    /// Fitted (continuation-style) surface value at grid index `u`.
    fn fitted(&self, u: usize, x: f64) -> f64 {
        let beta = &self.betas[u];
        let t = self.times[u];
        let mut row = vec![0.0; self.n_basis];
        self.basis_into(t, x, &mut row);
        row.iter().zip(beta).map(|(b, c)| b * c).sum()
    }
}

impl ValueSurface for LsmValueFunctions {
    fn values_into(&self, u: usize, xs: &[f64], out: &mut [f64]) {
        let t = self.times[u];
        let terminal = u + 1 == self.times.len();
        for (v, &x) in out.iter_mut().zip(xs) {
            if terminal {
                *v = terminal_value(&self.product, &self.ctx, x).unwrap_or(0.0);
            } else if self.roles[u] == StepRole::Decision {
                // Direct estimator: max of intrinsic and fitted continuation.
                let g = payoff(&self.product, &self.ctx, t, x).unwrap_or(0.0);
                *v = g.max(self.fitted(u, x));
            } else {
                *v = self.fitted(u, x);
            }
        }
    }

    fn continuations_into(&self, u: usize, xs: &[f64], out: &mut [f64]) {
        if u + 1 == self.times.len() {
            out.fill(0.0);
            return;
        }
        for (v, &x) in out.iter_mut().zip(xs) {
            *v = self.fitted(u, x);
        }
    }
}

/// Fits the per-time regression surfaces by backward induction on the
/// pricing ensemble.
///
/// At each step the realized downstream cashflows (discounted to the
/// current date) are regressed on the basis over all paths; at decision
/// dates paths exercise where the intrinsic value is positive and not
/// below the fitted continuation, and knocked-out barrier paths leave the
/// regression set.
pub fn lsm_value_functions(
    product: &ProductSpec,
    pricing: &PathEnsemble,
    model: &ModelSpec,
    domain: &Domain64,
    config: &LsmConfig,
) -> Result<LsmValueFunctions, CoreError> {
    config.validate()?;
    if pricing.measure() != Measure::RiskNeutral {
        return Err(CoreError::Config(
            "LSM pricing requires a risk-neutral ensemble".into(),
        ));
    }
    let grid = pricing.grid();
    let roles = product.schedule_roles(grid)?;
    let ctx = match model {
        ModelSpec::HullWhite(p) => PayoffContext::Rates { hw: *p },
        _ => PayoffContext::Equity {
            s0: model.spot().unwrap_or(1.0),
        },
    };
    let log_barrier = model.spot().and_then(|s0| product.log_barrier(s0));
    let n_basis = config.degree + 1
        + usize::from(config.include_payoff)
        + usize::from(log_barrier.is_some());
    let m = pricing.n_paths();
    let n_steps = grid.n_steps();
    let rates = model.rate_dynamics();

    let mut surfaces = LsmValueFunctions {
        betas: vec![Vec::new(); n_steps + 1],
        domain: *domain,
        product: product.clone(),
        ctx,
        roles: roles.clone(),
        times: grid.times().to_vec(),
        n_basis,
        include_payoff: config.include_payoff,
        log_barrier,
    };

    // Terminal cashflows and alive flags.
    let mut cashflow: Vec<f64> = pricing
        .row(n_steps)
        .iter()
        .map(|&x| terminal_value(product, &ctx, x).unwrap_or(0.0))
        .collect();
    let mut alive = vec![true; m];

    for u in (0..n_steps).rev() {
        let t = grid.times()[u];
        let dt = grid.dt(u);
        let xs = pricing.row(u);
        // Discount realized cashflows one step back (left-point rule).
        for i in 0..m {
            let r = rates.rate(t, xs[i]);
            cashflow[i] *= (-r * dt).exp();
        }
        // Knock-out: paths above the barrier at a monitoring date carry no
        // value and leave the regression set.
        if roles[u] == StepRole::Monitoring {
            if let Some(b) = log_barrier {
                for i in 0..m {
                    if alive[i] && xs[i] > b {
                        alive[i] = false;
                        cashflow[i] = 0.0;
                    }
                }
            }
        }

        let beta = if u == 0 {
            // Single common state: regression degenerates to the mean.
            let mean = cashflow.iter().sum::<f64>() / m as f64;
            let mut b = vec![0.0; n_basis];
            b[0] = mean;
            b
        } else {
            let rows: Vec<usize> = (0..m).filter(|&i| alive[i]).collect();
            if rows.len() < 2 * n_basis {
                return Err(CoreError::Numerical(format!(
                    "LSM regression at step {u}: only {} alive paths for {n_basis} basis functions",
                    rows.len()
                )));
            }
            let mut design = DMatrix::<f64>::zeros(rows.len(), n_basis);
            let mut target = DVector::<f64>::zeros(rows.len());
            let mut basis_row = vec![0.0; n_basis];
            for (r, &i) in rows.iter().enumerate() {
                surfaces.basis_into(t, xs[i], &mut basis_row);
                for (c, &b) in basis_row.iter().enumerate() {
                    design[(r, c)] = b;
                }
                target[r] = cashflow[i];
            }
            // Least squares by thin SVD: rank-revealing, and degenerate
            // designs (zero-vol paths collapse the monomial columns) still
            // get the minimum-norm solution.
            let svd = design.svd(true, true);
            let smax = svd
                .singular_values
                .iter()
                .fold(0.0f64, |a, &s| a.max(s));
            if smax <= 0.0 {
                return Err(CoreError::Numerical(format!(
                    "rank-deficient LSM design matrix at time step {u} (t = {t})"
                )));
            }
            let sol = svd.solve(&target, 1e-10 * smax).map_err(|e| {
                CoreError::Numerical(format!("LSM solve failed at time step {u}: {e}"))
            })?;
            sol.iter().copied().collect()
        };

        // Exercise update on the pricing paths.
        if roles[u] == StepRole::Decision && u > 0 {
            for i in 0..m {
                if !alive[i] {
                    continue;
                }
                let g = payoff(product, &ctx, t, xs[i])?;
                if g <= 0.0 {
                    continue;
                }
                let fitted: f64 = {
                    let mut row = vec![0.0; n_basis];
                    surfaces.basis_into(t, xs[i], &mut row);
                    row.iter().zip(&beta).map(|(b, c)| b * c).sum()
                };
                if g >= fitted {
                    cashflow[i] = g;
                    alive[i] = false;
                }
            }
        }
        surfaces.betas[u] = beta;
    }

    Ok(surfaces)
}

/// Exposure profile from fitted LSM surfaces along an independent
/// exposure ensemble; the pathwise logic is shared with the dynamic
/// Chebyshev engine.
pub fn lsm_exposure(
    surfaces: &LsmValueFunctions,
    exposure_ensemble: &PathEnsemble,
    product: &ProductSpec,
    model: &ModelSpec,
    engine_config: &crate::engine::EngineConfig,
) -> Result<ExposureProfile, CoreError> {
    if exposure_ensemble.grid().times() != surfaces.times.as_slice() {
        return Err(CoreError::Config(
            "exposure ensemble grid does not match the fitted surfaces".into(),
        ));
    }
    crate::engine::exposure_from_surface(surfaces, exposure_ensemble, product, model, engine_config)
}
