//! Independent reference pricers used for smoothing, full re-evaluation
//! and acceptance checks: the analytic Black-Scholes formula and a
//! Fourier-cosine (COS) expansion pricer with a backward-induction variant
//! for discretely monitored products.

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::engine::{ExposureProfile, ValueSurface};
use crate::error::CoreError;
use crate::math::{std_norm_cdf, std_norm_pdf};
use crate::models::TimeGrid;
use crate::moments::cf_cumulants;
use crate::products::{payoff, terminal_value, OptionKind, PayoffContext, ProductSpec, StepRole};

/// Black-Scholes European price; `tau = 0` returns the intrinsic value.
pub fn bs_european(s: f64, strike: f64, r: f64, sigma: f64, tau: f64, kind: OptionKind) -> f64 {
    if tau <= 0.0 {
        return match kind {
            OptionKind::Call => (s - strike).max(0.0),
            OptionKind::Put => (strike - s).max(0.0),
        };
    }
    let sig_sqrt = sigma * tau.sqrt();
    let d1 = ((s / strike).ln() + (r + 0.5 * sigma * sigma) * tau) / sig_sqrt;
    let d2 = d1 - sig_sqrt;
    let df = (-r * tau).exp();
    match kind {
        OptionKind::Call => s * std_norm_cdf(d1) - strike * df * std_norm_cdf(d2),
        OptionKind::Put => strike * df * std_norm_cdf(-d2) - s * std_norm_cdf(-d1),
    }
}

/// Black-Scholes spot delta.
pub fn bs_delta(s: f64, strike: f64, r: f64, sigma: f64, tau: f64, kind: OptionKind) -> f64 {
    let sig_sqrt = sigma * tau.sqrt();
    let d1 = ((s / strike).ln() + (r + 0.5 * sigma * sigma) * tau) / sig_sqrt;
    match kind {
        OptionKind::Call => std_norm_cdf(d1),
        OptionKind::Put => std_norm_cdf(d1) - 1.0,
    }
}

/// Black-Scholes spot gamma.
pub fn bs_gamma(s: f64, strike: f64, r: f64, sigma: f64, tau: f64) -> f64 {
    let sig_sqrt = sigma * tau.sqrt();
    let d1 = ((s / strike).ln() + (r + 0.5 * sigma * sigma) * tau) / sig_sqrt;
    std_norm_pdf(d1) / (s * sig_sqrt)
}

/// One-step expectation of an up-and-out call payoff under Black-Scholes:
/// `e^{-r dt} E[(S' - K)^+ 1_{S' <= B} | S]`, decomposed into vanilla
/// calls and a digital at the barrier.
pub fn bs_truncated_call(s: f64, strike: f64, barrier: f64, r: f64, sigma: f64, tau: f64) -> f64 {
    let call_k = bs_european(s, strike, r, sigma, tau, OptionKind::Call);
    let call_b = bs_european(s, barrier, r, sigma, tau, OptionKind::Call);
    let sig_sqrt = sigma * tau.sqrt();
    let d2 = ((s / barrier).ln() + (r - 0.5 * sigma * sigma) * tau) / sig_sqrt;
    let digital = (-r * tau).exp() * std_norm_cdf(d2);
    call_k - call_b - (barrier - strike) * digital
}

/// COS expansion configuration.
#[derive(Debug, Clone, Copy)]
pub struct CosConfig {
    /// Number of cosine terms.
    pub n_terms: usize,
    /// Cumulant-based truncation multiplier.
    pub range_l: f64,
    /// Dense-grid oversampling factor for backward induction.
    pub grid_factor: usize,
}

impl Default for CosConfig {
    fn default() -> Self {
        Self {
            n_terms: 1 << 10,
            range_l: 10.0,
            grid_factor: 4,
        }
    }
}

fn cos_range(cf: &dyn Fn(f64) -> Complex64, l: f64) -> (f64, f64) {
    let (c1, c2, c4) = cf_cumulants(cf);
    let half = (l * (c2 + c4.max(0.0).sqrt()).sqrt()).max(1e-4 * (1.0 + c1.abs()));
    (c1 - half, c1 + half)
}

// Fang-Oosterlee payoff integrals over [c, d] within [a, b]:
// chi = int e^y cos(u (y - a)) dy, psi = int cos(u (y - a)) dy.
fn chi(a: f64, c: f64, d: f64, u: f64) -> f64 {
    let (ec, ed) = (c.exp(), d.exp());
    ((u * (d - a)).cos() * ed - (u * (c - a)).cos() * ec + u * (u * (d - a)).sin() * ed
        - u * (u * (c - a)).sin() * ec)
        / (1.0 + u * u)
}

fn psi(a: f64, c: f64, d: f64, u: f64, k: usize) -> f64 {
    if k == 0 {
        d - c
    } else {
        ((u * (d - a)).sin() - (u * (c - a)).sin()) / u
    }
}

/// Fang-Oosterlee European price from the log-return characteristic
/// function `cf` (drift included) over maturity `tau`.
pub fn cos_european(
    cf: &dyn Fn(f64) -> Complex64,
    spot: f64,
    strike: f64,
    r: f64,
    tau: f64,
    kind: OptionKind,
    cfg: &CosConfig,
) -> Result<f64, CoreError> {
    if strike <= 0.0 || spot <= 0.0 {
        return Err(CoreError::InvalidParameter(
            "cos_european requires positive spot and strike".into(),
        ));
    }
    let x = (spot / strike).ln();
    let (a0, b0) = cos_range(cf, 10.0);
    // Range of y = ln(S_T / K) = x + X_tau.
    let (a, b) = (x + a0, x + b0);
    let width = b - a;
    let mut total = 0.0;
    let mut last_term = 0.0;
    for k in 0..cfg.n_terms {
        let u = k as f64 * std::f64::consts::PI / width;
        let payoff_coeff = 2.0 / width
            * strike
            * match kind {
                // put: K (1 - e^y) on [a, 0]
                OptionKind::Put => psi(a, a, 0.0_f64.min(b), u, k) - chi(a, a, 0.0_f64.min(b), u),
                // call: K (e^y - 1) on [0, b]
                OptionKind::Call => chi(a, 0.0_f64.max(a), b, u) - psi(a, 0.0_f64.max(a), b, u, k),
            };
        let weight = if k == 0 { 0.5 } else { 1.0 };
        let term = weight
            * (cf(u) * Complex64::new(0.0, u * (x - a)).exp()).re
            * payoff_coeff;
        total += term;
        last_term = term.abs();
    }
    if last_term > 1e-8 * (1.0 + total.abs()) {
        return Err(CoreError::Numerical(format!(
            "cos expansion tail did not converge: last term {last_term:.3e}"
        )));
    }
    Ok((-r * tau).exp() * total)
}

/// COS-based backward-induction reference for discretely monitored equity
/// products (the full re-evaluation comparator).
///
/// Each step stores the complex series of the discounted continuation
/// function, which is smooth; pointwise values apply the exercise or
/// knock-out rule analytically on top, so the reference has no Gibbs
/// artefacts at kinks or barriers.
pub struct CosReference {
    a: f64,
    width: f64,
    grid: TimeGrid,
    roles: Vec<StepRole>,
    product: ProductSpec,
    ctx: PayoffContext,
    /// `cont[u]`: coefficients of the discounted continuation at `t_u`
    /// (empty at the terminal index).
    cont: Vec<Vec<Complex64>>,
}

/// Builds the COS backward-induction reference on a dense grid.
///
/// `cf_step` is the characteristic function of the one-step log-return
/// increment under Q (stationary increments assumed), `cf_horizon` of the
/// full-horizon log-return; `r` is the deterministic short rate.
pub fn cos_backward_reference(
    product: &ProductSpec,
    s0: f64,
    r: f64,
    cf_step: &dyn Fn(f64) -> Complex64,
    cf_horizon: &dyn Fn(f64) -> Complex64,
    grid: &TimeGrid,
    cfg: &CosConfig,
) -> Result<CosReference, CoreError> {
    if !product.is_equity() {
        return Err(CoreError::Config(
            "the COS reference covers equity products only".into(),
        ));
    }
    if !grid.is_uniform() {
        return Err(CoreError::Config(
            "the COS reference requires a uniform grid".into(),
        ));
    }
    let ctx = PayoffContext::Equity { s0 };
    let roles = product.schedule_roles(grid)?;
    let (a, b) = cos_range(cf_horizon, cfg.range_l);
    let width = b - a;
    let n_cos = cfg.n_terms;
    let q = cfg.grid_factor * n_cos;
    let disc = (-r * grid.dt(0)).exp();

    // phi(u_k) for one step.
    let phi: Vec<Complex64> = (0..n_cos)
        .map(|k| cf_step(k as f64 * std::f64::consts::PI / width))
        .collect();

    // Dense midpoint grid values of the intrinsic payoff.
    let xs: Vec<f64> = (0..q)
        .map(|m| a + (m as f64 + 0.5) * width / q as f64)
        .collect();
    let maturity = product.maturity();
    let intrinsic: Vec<f64> = xs
        .iter()
        .map(|&x| payoff(product, &ctx, maturity, x))
        .collect::<Result<_, _>>()?;

    let mut planner = FftPlanner::new();
    let fft_fwd = planner.plan_fft_forward(q);
    let fft_inv = planner.plan_fft_inverse(2 * q);

    // DCT-II of dense values -> cosine coefficients (Makhoul reordering).
    let dct2 = |vals: &[f64]| -> Vec<f64> {
        let mut buf: Vec<Complex64> = vec![Complex64::new(0.0, 0.0); q];
        for m in 0..q / 2 {
            buf[m] = Complex64::new(vals[2 * m], 0.0);
            buf[q - 1 - m] = Complex64::new(vals[2 * m + 1], 0.0);
        }
        fft_fwd.process(&mut buf);
        (0..n_cos)
            .map(|k| {
                let tw = Complex64::new(0.0, -std::f64::consts::PI * k as f64 / (2.0 * q as f64))
                    .exp();
                2.0 / q as f64 * (buf[k] * tw).re
            })
            .collect()
    };

    // Evaluates the continuation series on the dense grid via an inverse
    // FFT of size 2Q.
    let cont_on_grid = |g: &[Complex64]| -> Vec<f64> {
        let mut buf: Vec<Complex64> = vec![Complex64::new(0.0, 0.0); 2 * q];
        for (k, &gk) in g.iter().enumerate() {
            let tw = Complex64::new(0.0, std::f64::consts::PI * k as f64 / (2.0 * q as f64)).exp();
            buf[k] = gk * tw;
        }
        fft_inv.process(&mut buf);
        buf[..q].iter().map(|c| c.re).collect()
    };

    let n_steps = grid.n_steps();
    let mut cont: Vec<Vec<Complex64>> = vec![Vec::new(); n_steps + 1];

    // Terminal values, then walk backwards.
    let mut values: Vec<f64> = xs
        .iter()
        .zip(&intrinsic)
        .map(|(&x, &g)| match product {
            ProductSpec::BarrierUpOut { .. } => {
                let lb = product.log_barrier(s0).unwrap();
                if x > lb {
                    0.0
                } else {
                    g
                }
            }
            _ => g,
        })
        .collect();

    for u in (0..n_steps).rev() {
        let coeffs = dct2(&values);
        // g_k = disc * phi_k * V_k, with the k = 0 term halved (sum').
        let g: Vec<Complex64> = coeffs
            .iter()
            .zip(&phi)
            .enumerate()
            .map(|(k, (&c, &p))| {
                let w = if k == 0 { 0.5 } else { 1.0 };
                disc * w * c * p
            })
            .collect();
        let cont_vals = cont_on_grid(&g);
        let t = grid.times()[u];
        values = xs
            .iter()
            .zip(&cont_vals)
            .zip(&intrinsic)
            .map(|((&x, &c), &gv)| match roles[u] {
                StepRole::Decision => gv.max(c),
                StepRole::Monitoring => {
                    let lb = product.log_barrier(s0).unwrap();
                    if x > lb {
                        0.0
                    } else {
                        c
                    }
                }
                StepRole::Plain => c,
            })
            .collect();
        let _ = t;
        cont[u] = g;
    }

    Ok(CosReference {
        a,
        width,
        grid: grid.clone(),
        roles,
        product: product.clone(),
        ctx,
        cont,
    })
}

impl CosReference {
    fn series(&self, g: &[Complex64], x: f64) -> f64 {
        let w = Complex64::new(0.0, std::f64::consts::PI * (x - self.a) / self.width).exp();
        let mut p = Complex64::new(1.0, 0.0);
        let mut acc = 0.0;
        for gk in g {
            acc += (gk * p).re;
            p *= w;
        }
        acc
    }

    /// Discounted continuation value at grid index `u`.
    pub fn continuation_at(&self, u: usize, x: f64) -> f64 {
        self.series(&self.cont[u], x)
    }

    /// Reference value at grid index `u`; the combine rule is applied
    /// analytically on top of the smooth continuation series.
    pub fn value_at(&self, u: usize, x: f64) -> f64 {
        let t = self.grid.times()[u];
        if u == self.grid.n_steps() {
            return terminal_value(&self.product, &self.ctx, x).unwrap_or(0.0);
        }
        let c = self.continuation_at(u, x);
        match self.roles[u] {
            StepRole::Decision => {
                let g = payoff(&self.product, &self.ctx, t, x).unwrap_or(0.0);
                g.max(c)
            }
            StepRole::Monitoring => {
                let lb = self
                    .product
                    .log_barrier(self.ctx.s0().unwrap_or(1.0))
                    .unwrap_or(f64::INFINITY);
                if x > lb {
                    0.0
                } else {
                    c
                }
            }
            StepRole::Plain => c,
        }
    }

    /// Reference price at `t = 0`, `x = 0`.
    pub fn price0(&self) -> f64 {
        self.value_at(0, 0.0)
    }
}

impl ValueSurface for CosReference {
    fn values_into(&self, u: usize, xs: &[f64], out: &mut [f64]) {
        const CHUNK: usize = 2048;
        out.par_chunks_mut(CHUNK)
            .zip(xs.par_chunks(CHUNK))
            .for_each(|(o, c)| {
                for (v, &x) in o.iter_mut().zip(c) {
                    *v = self.value_at(u, x);
                }
            });
    }

    fn continuations_into(&self, u: usize, xs: &[f64], out: &mut [f64]) {
        const CHUNK: usize = 2048;
        out.par_chunks_mut(CHUNK)
            .zip(xs.par_chunks(CHUNK))
            .for_each(|(o, c)| {
                for (v, &x) in o.iter_mut().zip(c) {
                    *v = self.continuation_at(u, x);
                }
            });
    }
}

/// Analytic Black-Scholes value surface for European options: the exact
/// full re-evaluation comparator.
pub struct AnalyticBsSurface {
    pub s0: f64,
    pub r: f64,
    pub sigma: f64,
    pub strike: f64,
    pub maturity: f64,
    pub kind: OptionKind,
    pub grid: TimeGrid,
}

impl ValueSurface for AnalyticBsSurface {
    fn values_into(&self, u: usize, xs: &[f64], out: &mut [f64]) {
        let tau = self.maturity - self.grid.times()[u];
        const CHUNK: usize = 4096;
        out.par_chunks_mut(CHUNK)
            .zip(xs.par_chunks(CHUNK))
            .for_each(|(o, c)| {
                for (v, &x) in o.iter_mut().zip(c) {
                    *v = bs_european(
                        self.s0 * x.exp(),
                        self.strike,
                        self.r,
                        self.sigma,
                        tau,
                        self.kind,
                    );
                }
            });
    }

    fn continuations_into(&self, u: usize, xs: &[f64], out: &mut [f64]) {
        // No early exercise: the continuation is the value itself.
        self.values_into(u, xs, out);
    }
}

/// Maximum relative deviation of EE and PFE profiles, normalized by a
/// caller-chosen scale (initial option price, or initial spot for the
/// Bermudan equity convention).
pub fn profile_error(
    a: &ExposureProfile,
    b: &ExposureProfile,
    normalizer: f64,
) -> Result<(f64, f64), CoreError> {
    if a.times != b.times {
        return Err(CoreError::Config(
            "profiles live on different time grids".into(),
        ));
    }
    if normalizer <= 0.0 {
        return Err(CoreError::InvalidParameter(
            "profile error normalizer must be positive".into(),
        ));
    }
    let ee = a
        .ee
        .iter()
        .zip(&b.ee)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / normalizer;
    let pfe = a
        .pfe
        .iter()
        .zip(&b.pfe)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / normalizer;
    Ok((ee, pfe))
}
