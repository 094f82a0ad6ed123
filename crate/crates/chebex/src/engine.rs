//! The dynamic Chebyshev engine: backward induction over per-time-step
//! interpolants of the value function, followed by pathwise evaluation of
//! the resulting closed-form approximations to produce EE/PFE profiles.
//!
//! The induction computes nodal continuation values from the pre-computed
//! Gamma matrix (`continuation_k = D_u(x_k) sum_j c_j(t_{u+1}) Gamma[k][j]`),
//! applies the product's combine rule and refits coefficients. Pathwise
//! evaluation walks the simulated ensemble forward, tracks exercise and
//! knock-out absorption per path, discounts under the pricing measure and
//! aggregates the expected exposure (mean) and potential future exposure
//! (upper quantile) per time step.

use rayon::prelude::*;

use crate::chebyshev::{cheb_nodes, Approximant, ChebApprox, SplitApprox};
use crate::error::CoreError;
use crate::math::compensated_sum;
use crate::models::{
    merton_cf, Measure, ModelSpec, PathEnsemble, RateDynamics, TimeGrid,
};
use crate::moments::{
    cf_moment_matrix, cf_split_blocks, normal_moment_block, normal_split_blocks, MomentMatrix,
    QuadratureConfig, SplitMomentBlocks,
};
use crate::oracles::{bs_european, bs_truncated_call, cos_european, CosConfig};
use crate::products::{payoff, terminal_value, PayoffContext, ProductSpec, StepRole};
use crate::Domain64;

/// Engine configuration for one dynamic-Chebyshev run.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Interpolation degree N (per piece when the domain is split).
    pub n: usize,
    /// Domain half-width in standard deviations of `X_T`.
    pub domain_k: f64,
    /// Optional split point in risk-factor coordinates; each piece gets
    /// degree `n` and the first-step smoothing is skipped (the split at
    /// the kink already removes it).
    pub split: Option<f64>,
    /// Replace the first backward step with an exact one-period European
    /// price at the nodes (equity models only).
    pub smoothing: bool,
    /// PFE quantile level.
    pub alpha: f64,
    /// Out-of-domain policy; `Auto` derives it from the product.
    pub extrapolation: ExtrapolationChoice,
    /// Characteristic-function quadrature settings (Merton Gamma).
    pub cf_quad: QuadratureConfig,
    /// Retain the full per-path exposure matrix in the profile.
    pub retain_exposure_matrix: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n: 128,
            domain_k: 4.0,
            split: None,
            smoothing: true,
            alpha: 0.975,
            extrapolation: ExtrapolationChoice::Auto,
            cf_quad: QuadratureConfig::default(),
            retain_exposure_matrix: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.n < 4 {
            return Err(CoreError::InvalidParameter(
                "engine.n must be at least 4".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CoreError::InvalidParameter(
                "engine.alpha must lie in (0, 1)".into(),
            ));
        }
        if self.domain_k <= 0.0 {
            return Err(CoreError::InvalidParameter(
                "engine.domain_k must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Configurable extrapolation tag; `Auto` resolves per product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ExtrapolationChoice {
    Auto,
    PutLike,
    CallParity,
    Barrier,
    Clamp,
}

/// Resolved out-of-domain policy.
#[derive(Debug, Clone, Copy)]
enum ExtrapolationRule {
    /// Put: worthless far above, always-exercised (intrinsic) far below.
    PutLike { strike: f64, s0: f64 },
    /// Call: worthless far below; parity value far above.
    CallParity {
        strike: f64,
        s0: f64,
        rate: f64,
        maturity: f64,
    },
    /// Up-and-out: zero on both sides.
    Barrier,
    /// Evaluate at the nearest domain edge.
    Clamp,
}

impl ExtrapolationRule {
    fn resolve(
        choice: ExtrapolationChoice,
        product: &ProductSpec,
        model: &ModelSpec,
    ) -> Result<Self, CoreError> {
        use crate::products::OptionKind;
        let auto = || -> Result<Self, CoreError> {
            Ok(match product {
                ProductSpec::European { kind, strike, maturity }
                | ProductSpec::Bermudan { kind, strike, maturity, .. } => match kind {
                    OptionKind::Put => ExtrapolationRule::PutLike {
                        strike: *strike,
                        s0: model.spot().unwrap_or(1.0),
                    },
                    OptionKind::Call => ExtrapolationRule::CallParity {
                        strike: *strike,
                        s0: model.spot().unwrap_or(1.0),
                        rate: match model.rate_dynamics() {
                            RateDynamics::Deterministic(r) => r,
                            RateDynamics::HullWhite(p) => p.flat_forward,
                        },
                        maturity: *maturity,
                    },
                },
                ProductSpec::BarrierUpOut { .. } => ExtrapolationRule::Barrier,
                ProductSpec::BermudanSwaption { .. } => ExtrapolationRule::Clamp,
            })
        };
        match choice {
            ExtrapolationChoice::Auto => auto(),
            ExtrapolationChoice::PutLike => match product {
                ProductSpec::European { strike, .. } | ProductSpec::Bermudan { strike, .. } => {
                    Ok(ExtrapolationRule::PutLike {
                        strike: *strike,
                        s0: model.spot().unwrap_or(1.0),
                    })
                }
                _ => auto(),
            },
            ExtrapolationChoice::Barrier => Ok(ExtrapolationRule::Barrier),
            ExtrapolationChoice::Clamp => Ok(ExtrapolationRule::Clamp),
            ExtrapolationChoice::CallParity => match product {
                ProductSpec::European { strike, maturity, .. }
                | ProductSpec::Bermudan { strike, maturity, .. } => {
                    Ok(ExtrapolationRule::CallParity {
                        strike: *strike,
                        s0: model.spot().unwrap_or(1.0),
                        rate: match model.rate_dynamics() {
                            RateDynamics::Deterministic(r) => r,
                            RateDynamics::HullWhite(p) => p.flat_forward,
                        },
                        maturity: *maturity,
                    })
                }
                _ => auto(),
            },
        }
    }

    /// Value for `x` outside the interpolation domain at time `t`.
    fn outside(&self, domain: &Domain64, t: f64, x: f64) -> f64 {
        match self {
            ExtrapolationRule::PutLike { strike, s0 } => {
                if x > domain.upper() {
                    0.0
                } else {
                    (strike - s0 * x.exp()).max(0.0)
                }
            }
            ExtrapolationRule::CallParity {
                strike,
                s0,
                rate,
                maturity,
            } => {
                if x < domain.lower() {
                    0.0
                } else {
                    s0 * x.exp() - strike * (-rate * (maturity - t)).exp()
                }
            }
            ExtrapolationRule::Barrier => 0.0,
            ExtrapolationRule::Clamp => f64::NAN, // handled by the caller via clamping
        }
    }
}

/// Interpolation domain from the model marginal: the union over the
/// simulated measures of `[mean_T - k sigma_T, mean_T + k sigma_T]`, with
/// the upper bound replaced by the log-barrier for knock-out products.
pub fn select_domain(
    model: &ModelSpec,
    product: &ProductSpec,
    horizon: f64,
    k: f64,
    measures: &[Measure],
) -> Result<Domain64, CoreError> {
    if measures.is_empty() {
        return Err(CoreError::Config("select_domain needs a measure".into()));
    }
    let mut lower = f64::INFINITY;
    let mut upper = f64::NEG_INFINITY;
    for m in measures {
        let (mean, std) = model.marginal_mean_std(horizon, *m);
        lower = lower.min(mean - k * std);
        upper = upper.max(mean + k * std);
    }
    if let Some(s0) = model.spot() {
        if let Some(b) = product.log_barrier(s0) {
            upper = b;
        }
    }
    Domain64::new(lower, upper)
}

/// Gamma matrices for one backward step, single-domain or split.
enum GammaSet {
    Single(MomentMatrix),
    Split(SplitMomentBlocks),
}

fn build_gamma(
    model: &ModelSpec,
    domain: &Domain64,
    split: Option<f64>,
    n: usize,
    dt: f64,
    quad: &QuadratureConfig,
) -> Result<GammaSet, CoreError> {
    let tag = model.tag();
    match split {
        None => {
            let m = match model {
                ModelSpec::BlackScholes(p) => {
                    let drift = (p.r - 0.5 * p.sigma * p.sigma) * dt;
                    let nodes = cheb_nodes(n, domain);
                    let means: Vec<f64> = nodes.iter().map(|x| x + drift).collect();
                    normal_moment_block(domain, &means, p.sigma * p.sigma * dt, n, dt, tag)?
                }
                ModelSpec::HullWhite(p) => {
                    let decay = (-p.a_q * dt).exp();
                    let var = p.sigma_q * p.sigma_q * (1.0 - decay * decay) / (2.0 * p.a_q);
                    let nodes = cheb_nodes(n, domain);
                    let means: Vec<f64> = nodes.iter().map(|x| x * decay).collect();
                    normal_moment_block(domain, &means, var, n, dt, tag)?
                }
                ModelSpec::Merton(p) => {
                    let pp = *p;
                    let cf = move |u: f64| merton_cf(num_complex::Complex64::new(u, 0.0), dt, &pp);
                    cf_moment_matrix(&cf, domain, n, dt, quad, tag)?
                }
            };
            Ok(GammaSet::Single(m))
        }
        Some(split_at) => {
            if split_at <= domain.lower() || split_at >= domain.upper() {
                return Err(CoreError::Config(
                    "split point must lie strictly inside the domain".into(),
                ));
            }
            let left = Domain64::new(domain.lower(), split_at)?;
            let right = Domain64::new(split_at, domain.upper())?;
            let blocks = match model {
                ModelSpec::BlackScholes(p) => {
                    let drift = (p.r - 0.5 * p.sigma * p.sigma) * dt;
                    normal_split_blocks(
                        &left,
                        &right,
                        (n, n),
                        move |x| x + drift,
                        p.sigma * p.sigma * dt,
                        dt,
                        tag,
                    )?
                }
                ModelSpec::HullWhite(p) => {
                    let decay = (-p.a_q * dt).exp();
                    let var = p.sigma_q * p.sigma_q * (1.0 - decay * decay) / (2.0 * p.a_q);
                    normal_split_blocks(&left, &right, (n, n), move |x| x * decay, var, dt, tag)?
                }
                ModelSpec::Merton(p) => {
                    let pp = *p;
                    let cf = move |u: f64| merton_cf(num_complex::Complex64::new(u, 0.0), dt, &pp);
                    cf_split_blocks(&cf, &left, &right, (n, n), dt, quad, tag)?
                }
            };
            Ok(GammaSet::Split(blocks))
        }
    }
}

/// One time slice of the induction output.
#[derive(Debug, Clone)]
pub struct Frame {
    /// Fitted value function at this grid time.
    pub value: Approximant<f64>,
    /// Fitted continuation function at decision dates (used for the
    /// pathwise exercise test).
    pub continuation: Option<Approximant<f64>>,
    pub role: StepRole,
}

/// The per-time-step value functions produced by the backward induction.
pub struct ValueFunctionSet {
    grid: TimeGrid,
    domain: Domain64,
    frames: Vec<Frame>,
    product: ProductSpec,
    ctx: PayoffContext,
    rule: ExtrapolationRule,
    t0_price: f64,
}

impl ValueFunctionSet {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn domain(&self) -> &Domain64 {
        &self.domain
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    /// Price at `t = 0` in the initial state `x = 0`.
    pub fn t0_price(&self) -> f64 {
        self.t0_price
    }

    /// Single-point value with the extrapolation rule applied.
    pub fn value_at(&self, u: usize, x: f64) -> f64 {
        if u == self.grid.n_steps() {
            return terminal_value(&self.product, &self.ctx, x).unwrap_or(0.0);
        }
        let frame = &self.frames[u];
        eval_with_rule(&frame.value, &self.domain, &self.rule, self.grid.times()[u], x)
    }

    /// Single-point continuation value (falls back to the value function
    /// away from decision dates).
    pub fn continuation_at(&self, u: usize, x: f64) -> f64 {
        if u == self.grid.n_steps() {
            return 0.0;
        }
        let frame = &self.frames[u];
        let approx = frame.continuation.as_ref().unwrap_or(&frame.value);
        eval_with_rule(approx, &self.domain, &self.rule, self.grid.times()[u], x)
    }
}

/// Canonical pathwise evaluation: explicit Chebyshev-basis recurrence with
/// coefficient dot product. Kept in this exact form (rather than Clenshaw)
/// so that multi-product evaluation, which reuses one basis table for many
/// coefficient sets, is bitwise identical to single-product runs.
fn eval_basis_dot(coeffs: &[f64], z: f64) -> f64 {
    let mut acc = coeffs[0];
    if coeffs.len() == 1 {
        return acc;
    }
    let mut t_prev = 1.0;
    let mut t_cur = z;
    acc += coeffs[1] * z;
    for c in &coeffs[2..] {
        let t_next = 2.0 * z * t_cur - t_prev;
        t_prev = t_cur;
        t_cur = t_next;
        acc += c * t_next;
    }
    acc
}

fn eval_approx(approx: &Approximant<f64>, x: f64) -> f64 {
    match approx {
        Approximant::Single(a) => eval_basis_dot(a.coeffs(), a.domain().to_unit(x)),
        Approximant::Split(s) => {
            let piece = if x <= s.split_point() { s.left() } else { s.right() };
            eval_basis_dot(piece.coeffs(), piece.domain().to_unit(x))
        }
    }
}

fn eval_with_rule(
    approx: &Approximant<f64>,
    domain: &Domain64,
    rule: &ExtrapolationRule,
    t: f64,
    x: f64,
) -> f64 {
    if domain.contains(x) {
        eval_approx(approx, x)
    } else if matches!(rule, ExtrapolationRule::Clamp) {
        eval_approx(approx, domain.clamp(x))
    } else {
        rule.outside(domain, t, x)
    }
}

/// Abstraction over "a value function per grid time" consumed by the
/// exposure sweep; implemented by the dynamic Chebyshev set, the LSM
/// regression surfaces and the reference pricers, so all methods share
/// the identical pathwise exposure logic.
pub trait ValueSurface: Sync {
    /// Values at grid index `u` for a batch of risk-factor states.
    fn values_into(&self, u: usize, xs: &[f64], out: &mut [f64]);
    /// Continuation values used by the exercise decision.
    fn continuations_into(&self, u: usize, xs: &[f64], out: &mut [f64]);
}

impl ValueSurface for ValueFunctionSet {
    fn values_into(&self, u: usize, xs: &[f64], out: &mut [f64]) {
        const CHUNK: usize = 8192;
        if u == self.grid.n_steps() {
            out.par_chunks_mut(CHUNK)
                .zip(xs.par_chunks(CHUNK))
                .for_each(|(o, c)| {
                    for (v, &x) in o.iter_mut().zip(c) {
                        *v = terminal_value(&self.product, &self.ctx, x).unwrap_or(0.0);
                    }
                });
            return;
        }
        let frame = &self.frames[u];
        let t = self.grid.times()[u];
        out.par_chunks_mut(CHUNK)
            .zip(xs.par_chunks(CHUNK))
            .for_each(|(o, c)| {
                for (v, &x) in o.iter_mut().zip(c) {
                    *v = eval_with_rule(&frame.value, &self.domain, &self.rule, t, x);
                }
            });
    }

    fn continuations_into(&self, u: usize, xs: &[f64], out: &mut [f64]) {
        const CHUNK: usize = 8192;
        if u == self.grid.n_steps() {
            out.fill(0.0);
            return;
        }
        let frame = &self.frames[u];
        let approx = frame.continuation.as_ref().unwrap_or(&frame.value);
        let t = self.grid.times()[u];
        out.par_chunks_mut(CHUNK)
            .zip(xs.par_chunks(CHUNK))
            .for_each(|(o, c)| {
                for (v, &x) in o.iter_mut().zip(c) {
                    *v = eval_with_rule(approx, &self.domain, &self.rule, t, x);
                }
            });
    }
}

fn payoff_context(model: &ModelSpec) -> PayoffContext {
    match model {
        ModelSpec::HullWhite(p) => PayoffContext::Rates { hw: *p },
        _ => PayoffContext::Equity {
            s0: model.spot().unwrap_or(1.0),
        },
    }
}

/// Nodal continuation values `D_u(x_k) * (Gamma row . coeffs)` for the
/// single-domain case.
fn continuation_nodes(
    gamma: &MomentMatrix,
    coeffs: &[f64],
    discounts: &[f64],
) -> Vec<f64> {
    (0..gamma.n_rows())
        .map(|k| {
            let row = gamma.row(k);
            let dot: f64 = row.iter().zip(coeffs).map(|(g, c)| g * c).sum();
            discounts[k] * dot
        })
        .collect()
}

/// Runs the backward induction on a pre-selected domain.
pub fn backward_induction(
    model: &ModelSpec,
    product: &ProductSpec,
    grid: &TimeGrid,
    domain: &Domain64,
    config: &EngineConfig,
) -> Result<ValueFunctionSet, CoreError> {
    config.validate()?;
    model.validate()?;
    product.validate()?;
    if !grid.is_uniform() {
        return Err(CoreError::Config(
            "backward induction requires a uniform grid (stationary increments)".into(),
        ));
    }
    let roles = product.schedule_roles(grid)?;
    let ctx = payoff_context(model);
    let rule = ExtrapolationRule::resolve(config.extrapolation, product, model)?;
    let dt = grid.dt(0);
    let n = config.n;
    let gamma = build_gamma(model, domain, config.split, n, dt, &config.cf_quad)?;

    // Node sets per piece.
    let node_sets: Vec<Vec<f64>> = match &gamma {
        GammaSet::Single(_) => vec![cheb_nodes(n, domain)],
        GammaSet::Split(b) => vec![
            cheb_nodes(n, b.blocks[0][0].domain()),
            cheb_nodes(n, b.blocks[1][1].domain()),
        ],
    };
    let rates = model.rate_dynamics();
    let n_steps = grid.n_steps();
    let mut frames: Vec<Option<Frame>> = vec![None; n_steps + 1];

    let fit_piecewise = |values: &[Vec<f64>]| -> Result<Approximant<f64>, CoreError> {
        match &gamma {
            GammaSet::Single(_) => Ok(Approximant::Single(ChebApprox::fit(&values[0], *domain)?)),
            GammaSet::Split(b) => {
                let left = ChebApprox::fit(&values[0], *b.blocks[0][0].domain())?;
                let right = ChebApprox::fit(&values[1], *b.blocks[1][1].domain())?;
                Ok(Approximant::Split(SplitApprox::new(left, right)?))
            }
        }
    };

    // Terminal slice.
    let terminal: Result<Vec<Vec<f64>>, CoreError> = node_sets
        .iter()
        .map(|nodes| nodes.iter().map(|&x| terminal_value(product, &ctx, x)).collect())
        .collect();
    let terminal = terminal?;
    frames[n_steps] = Some(Frame {
        value: fit_piecewise(&terminal)?,
        continuation: None,
        role: roles[n_steps],
    });

    let mut coeff_sets: Vec<Vec<f64>> = match frames[n_steps].as_ref().unwrap().value.clone() {
        Approximant::Single(a) => vec![a.coeffs().to_vec()],
        Approximant::Split(s) => vec![s.left().coeffs().to_vec(), s.right().coeffs().to_vec()],
    };

    let smoothing_active = config.smoothing && config.split.is_none() && product.is_equity();

    for u in (0..n_steps).rev() {
        let t = grid.times()[u];
        // Per-piece nodal discounts D_u(x_k).
        let discounts: Vec<Vec<f64>> = node_sets
            .iter()
            .map(|nodes| {
                nodes
                    .iter()
                    .map(|&x| (-dt * rates.rate(t, x)).exp())
                    .collect()
            })
            .collect();

        // Continuation values per piece.
        let mut cont: Vec<Vec<f64>> = match &gamma {
            GammaSet::Single(m) => {
                vec![continuation_nodes(m, &coeff_sets[0], &discounts[0])]
            }
            GammaSet::Split(b) => (0..2)
                .map(|s| {
                    let part0 = continuation_nodes(&b.blocks[s][0], &coeff_sets[0], &discounts[s]);
                    let part1 = continuation_nodes(&b.blocks[s][1], &coeff_sets[1], &discounts[s]);
                    part0.iter().zip(&part1).map(|(a, c)| a + c).collect()
                })
                .collect(),
        };

        // First-step smoothing: exact one-period European continuation.
        if u == n_steps - 1 && smoothing_active {
            if let Some(exact) = one_step_european(model, product, dt, config)? {
                for (piece, nodes) in cont.iter_mut().zip(&node_sets) {
                    for (c, &x) in piece.iter_mut().zip(nodes) {
                        *c = exact(x);
                    }
                }
            }
        }

        // Combine with intrinsic per the product rule.
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(cont.len());
        for (piece, nodes) in cont.iter().zip(&node_sets) {
            let mut v = Vec::with_capacity(nodes.len());
            for (&c, &x) in piece.iter().zip(nodes) {
                let intrinsic = if roles[u] == StepRole::Decision {
                    payoff(product, &ctx, t, x)?
                } else {
                    0.0
                };
                let combined = crate::products::dp_combine(product, &ctx, t, intrinsic, c, x)?;
                if !combined.is_finite() {
                    return Err(CoreError::Numerical(format!(
                        "non-finite nodal value at time step {u} (t = {t})"
                    )));
                }
                v.push(combined);
            }
            values.push(v);
        }

        let value_fit = fit_piecewise(&values)?;
        let continuation_fit = if roles[u] == StepRole::Decision {
            Some(fit_piecewise(&cont)?)
        } else {
            None
        };
        coeff_sets = match &value_fit {
            Approximant::Single(a) => vec![a.coeffs().to_vec()],
            Approximant::Split(s) => {
                vec![s.left().coeffs().to_vec(), s.right().coeffs().to_vec()]
            }
        };
        frames[u] = Some(Frame {
            value: value_fit,
            continuation: continuation_fit,
            role: roles[u],
        });
    }

    let frames: Vec<Frame> = frames.into_iter().map(Option::unwrap).collect();
    let mut set = ValueFunctionSet {
        grid: grid.clone(),
        domain: *domain,
        frames,
        product: product.clone(),
        ctx,
        rule,
        t0_price: 0.0,
    };
    set.t0_price = set.value_at(0, 0.0);
    if !set.t0_price.is_finite() {
        return Err(CoreError::Numerical("non-finite t = 0 price".into()));
    }
    Ok(set)
}

/// Exact one-period European continuation at the nodes, when available
/// (Black-Scholes closed form, Merton COS, truncated call for barriers).
#[allow(clippy::type_complexity)]
fn one_step_european(
    model: &ModelSpec,
    product: &ProductSpec,
    dt: f64,
    config: &EngineConfig,
) -> Result<Option<Box<dyn Fn(f64) -> f64>>, CoreError> {
    use crate::products::OptionKind;
    match (model, product) {
        (ModelSpec::BlackScholes(p), ProductSpec::European { kind, strike, .. })
        | (ModelSpec::BlackScholes(p), ProductSpec::Bermudan { kind, strike, .. }) => {
            let (s0, r, sigma, k, kind) = (p.s0, p.r, p.sigma, *strike, *kind);
            Ok(Some(Box::new(move |x| {
                bs_european(s0 * x.exp(), k, r, sigma, dt, kind)
            })))
        }
        (
            ModelSpec::BlackScholes(p),
            ProductSpec::BarrierUpOut {
                kind: OptionKind::Call,
                strike,
                barrier,
                ..
            },
        ) => {
            let (s0, r, sigma, k, b) = (p.s0, p.r, p.sigma, *strike, *barrier);
            Ok(Some(Box::new(move |x| {
                bs_truncated_call(s0 * x.exp(), k, b, r, sigma, dt)
            })))
        }
        (ModelSpec::Merton(p), ProductSpec::European { kind, strike, .. })
        | (ModelSpec::Merton(p), ProductSpec::Bermudan { kind, strike, .. }) => {
            let (pp, k, kind) = (*p, *strike, *kind);
            let cos_cfg = CosConfig {
                n_terms: config.cf_quad.n_cos,
                ..CosConfig::default()
            };
            let cf = move |u: f64| merton_cf(num_complex::Complex64::new(u, 0.0), dt, &pp);
            Ok(Some(Box::new(move |x| {
                cos_european(&cf, pp.s0 * x.exp(), k, pp.r, dt, kind, &cos_cfg).unwrap_or(f64::NAN)
            })))
        }
        _ => Ok(None),
    }
}

/// Convenience wrapper: select the domain, then run the induction.
pub fn build_value_functions(
    model: &ModelSpec,
    product: &ProductSpec,
    grid: &TimeGrid,
    measures: &[Measure],
    config: &EngineConfig,
) -> Result<ValueFunctionSet, CoreError> {
    let horizon = *grid.times().last().unwrap();
    let domain = select_domain(model, product, horizon, config.domain_k, measures)?;
    backward_induction(model, product, grid, &domain, config)
}

/// EE/PFE profile of one product under one measure.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureProfile {
    pub times: Vec<f64>,
    pub ee: Vec<f64>,
    pub pfe: Vec<f64>,
    pub alpha: f64,
    pub measure: Measure,
    pub alive_counts: Vec<usize>,
    pub n_paths: usize,
    /// Grid index at which each path was absorbed (exercise, knock-out or
    /// terminal settlement); exposure is zero strictly after this index.
    pub absorbed_at: Vec<Option<usize>>,
    /// Retained per-path exposures, time-major, when requested.
    pub exposure_matrix: Option<Vec<f64>>,
}

impl ExposureProfile {
    /// Profile CSV: `t, EE, PFE, alive_count` per grid time.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<(), CoreError> {
        writeln!(w, "t,ee,pfe,alive_count")?;
        for u in 0..self.times.len() {
            writeln!(
                w,
                "{},{},{},{}",
                self.times[u], self.ee[u], self.pfe[u], self.alive_counts[u]
            )?;
        }
        Ok(())
    }
}

/// Empirical upper quantile: the `ceil(M alpha)`-th order statistic
/// (the smallest sample value whose empirical CDF reaches `alpha`).
pub fn pfe_quantile(sample: &[f64], alpha: f64) -> Result<f64, CoreError> {
    if sample.is_empty() {
        return Err(CoreError::InvalidData("empty exposure sample".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CoreError::InvalidParameter(
            "quantile level must lie in (0, 1)".into(),
        ));
    }
    let m = sample.len();
    let rank = ((m as f64 * alpha).ceil() as usize).clamp(1, m);
    let mut scratch = sample.to_vec();
    let (_, kth, _) = scratch.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*kth)
}

/// Pathwise exposure sweep over an ensemble against any value surface.
///
/// Implements the absorption rules: a knocked-out path has zero exposure
/// from the knock-out date on; an exercised path records the settlement
/// value at the exercise date and zero afterwards. Under Q exposures are
/// discounted with the pathwise left-point rule; under P they are not
/// discounted. The EE mean uses a compensated sequential sum and the PFE
/// a selection of the order statistic, so results do not depend on thread
/// count.
pub fn exposure_from_surface(
    surface: &dyn ValueSurface,
    ensemble: &PathEnsemble,
    product: &ProductSpec,
    model: &ModelSpec,
    config: &EngineConfig,
) -> Result<ExposureProfile, CoreError> {
    config.validate()?;
    let grid = ensemble.grid();
    let roles = product.schedule_roles(grid)?;
    let ctx = payoff_context(model);
    let m = ensemble.n_paths();
    let n_steps = grid.n_steps();
    let discounting = ensemble.measure() == Measure::RiskNeutral;
    let rates = model.rate_dynamics();
    let log_barrier = model.spot().and_then(|s0| product.log_barrier(s0));

    let mut alive = vec![true; m];
    let mut discount = vec![1.0; m];
    let mut values = vec![0.0; m];
    let mut conts = vec![0.0; m];
    let mut exposures = vec![0.0; m];

    let mut ee = Vec::with_capacity(n_steps + 1);
    let mut pfe = Vec::with_capacity(n_steps + 1);
    let mut alive_counts = Vec::with_capacity(n_steps + 1);
    let mut matrix = if config.retain_exposure_matrix {
        Some(Vec::with_capacity(m * (n_steps + 1)))
    } else {
        None
    };

    for u in 0..=n_steps {
        let t = grid.times()[u];
        let xs = ensemble.row(u);
        alive_counts.push(alive.iter().filter(|a| **a).count());

        surface.values_into(u, xs, &mut values);
        let decision = roles[u] == StepRole::Decision && u < n_steps;
        if decision {
            surface.continuations_into(u, xs, &mut conts);
        }

        for i in 0..m {
            if !alive[i] {
                exposures[i] = 0.0;
                continue;
            }
            let x = xs[i];
            // Knock-out at a monitoring date (the terminal indicator is
            // part of the terminal value itself).
            if roles[u] == StepRole::Monitoring && u < n_steps {
                if let Some(b) = log_barrier {
                    if x > b {
                        alive[i] = false;
                        exposures[i] = 0.0;
                        continue;
                    }
                }
            }
            let d = if discounting { discount[i] } else { 1.0 };
            if u == n_steps {
                // Terminal settlement.
                exposures[i] = d * values[i].max(0.0);
                alive[i] = false;
                continue;
            }
            if decision {
                let intrinsic = payoff(product, &ctx, t, x)?;
                let tol = 1e-12 * (1.0 + intrinsic.abs());
                if intrinsic > 0.0 && intrinsic >= conts[i] - tol {
                    // Exercise: settles at intrinsic, no exposure afterwards.
                    exposures[i] = d * intrinsic;
                    alive[i] = false;
                    continue;
                }
            }
            exposures[i] = d * values[i].max(0.0);
        }

        ee.push(compensated_sum(&exposures) / m as f64);
        pfe.push(pfe_quantile(&exposures, config.alpha)?);
        if let Some(mat) = matrix.as_mut() {
            mat.extend_from_slice(&exposures);
        }

        // Advance the pathwise discount to t_{u+1} (left-point rule).
        if discounting && u < n_steps {
            let dt = grid.dt(u);
            match rates {
                RateDynamics::Deterministic(r) => {
                    let f = (-r * dt).exp();
                    for d in discount.iter_mut() {
                        *d *= f;
                    }
                }
                RateDynamics::HullWhite(_) => {
                    for (d, &x) in discount.iter_mut().zip(xs) {
                        *d *= (-dt * rates.rate(t, x)).exp();
                    }
                }
            }
        }
    }

    Ok(ExposureProfile {
        times: grid.times().to_vec(),
        ee,
        pfe,
        alpha: config.alpha,
        measure: ensemble.measure(),
        alive_counts,
        n_paths: m,
        exposure_matrix: matrix,
    })
}

/// Exposure profile from a dynamic Chebyshev value-function set.
pub fn compute_exposure(
    vfs: &ValueFunctionSet,
    ensemble: &PathEnsemble,
    product: &ProductSpec,
    model: &ModelSpec,
    config: &EngineConfig,
) -> Result<ExposureProfile, CoreError> {
    if vfs.grid() != ensemble.grid() {
        return Err(CoreError::Config(
            "ensemble grid does not match the value-function grid".into(),
        ));
    }
    exposure_from_surface(vfs, ensemble, product, model, config)
}

/// CVA from a discounted (pricing-measure) EE profile:
/// `(1 - recovery) * sum_u EE(t_u) * P(default in bucket u)`.
pub fn cva_from_profile(
    profile: &ExposureProfile,
    default_probs: &[f64],
    recovery: f64,
) -> Result<f64, CoreError> {
    if profile.measure != Measure::RiskNeutral {
        return Err(CoreError::Config(
            "CVA requires a pricing-measure (discounted) EE profile".into(),
        ));
    }
    if default_probs.len() != profile.times.len() {
        return Err(CoreError::InvalidData(
            "default probabilities must match the profile grid".into(),
        ));
    }
    if default_probs.iter().any(|p| *p < 0.0) {
        return Err(CoreError::InvalidData(
            "default probabilities must be non-negative".into(),
        ));
    }
    let total: f64 = default_probs.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(CoreError::InvalidData(
            "default probabilities sum to more than one".into(),
        ));
    }
    Ok((1.0 - recovery)
        * profile
            .ee
            .iter()
            .zip(default_probs)
            .map(|(e, p)| e * p)
            .sum::<f64>())
}

/// Delta and Gamma along the ensemble, time-major like the ensemble: the
/// coefficient-space derivatives of each per-time value function evaluated
/// at the simulated states (out-of-domain states are clamped to the edge).
///
/// These are sensitivities to the risk factor `x_t`. For the equity models
/// `x_t = ln(S_t/S_0)` is a parallel shift of `x_0`, so `dV/dx_0 = dV/dx_t`
/// along a path; [`delta_wrt_spot`] and [`gamma_wrt_spot`] convert to spot
/// sensitivities.
pub fn greek_profiles(vfs: &ValueFunctionSet, ensemble: &PathEnsemble) -> (Vec<f64>, Vec<f64>) {
    let m = ensemble.n_paths();
    let n_times = ensemble.grid().times().len();
    let mut delta = vec![0.0; n_times * m];
    let mut gamma = vec![0.0; n_times * m];
    for u in 0..n_times {
        let first = vfs.frames[u].value.differentiate();
        let second = first.differentiate();
        let xs = ensemble.row(u);
        let (d_row, g_row) = (
            &mut delta[u * m..(u + 1) * m],
            &mut gamma[u * m..(u + 1) * m],
        );
        for ((d, g), &x) in d_row.iter_mut().zip(g_row.iter_mut()).zip(xs) {
            let xc = vfs.domain.clamp(x);
            *d = first.evaluate(xc);
            *g = second.evaluate(xc);
        }
    }
    (delta, gamma)
}

/// Converts an x-space delta to a spot delta: `dV/dS = (dV/dx) / S`.
pub fn delta_wrt_spot(dv_dx: f64, s: f64) -> f64 {
    dv_dx / s
}

/// Converts x-space first and second derivatives to a spot gamma:
/// `d2V/dS2 = (d2V/dx2 - dV/dx) / S^2`.
pub fn gamma_wrt_spot(d2v_dx2: f64, dv_dx: f64, s: f64) -> f64 {
    (d2v_dx2 - dv_dx) / (s * s)
}

/// Shared-evaluation statistics returned by [`multi_product_exposure`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharedEvalStats {
    /// Number of per-(path, time) Chebyshev basis tables constructed.
    pub basis_evals: u64,
}

/// Exposure profiles for several products sharing one underlying, one
/// domain and one Gamma matrix. The Chebyshev basis values at each
/// simulated state are computed once per (path, time) and reused across
/// all coefficient sets; the pathwise sweep itself is the single-product
/// code, so per-product profiles are bitwise identical to separate runs.
pub fn multi_product_exposure(
    products: &[ProductSpec],
    model: &ModelSpec,
    ensemble: &PathEnsemble,
    domain: &Domain64,
    config: &EngineConfig,
) -> Result<(Vec<ExposureProfile>, SharedEvalStats), CoreError> {
    if config.split.is_some() {
        return Err(CoreError::Config(
            "multi-product sharing is implemented for unsplit domains".into(),
        ));
    }
    let grid = ensemble.grid();
    // One induction per product on the shared domain; the Gamma matrix is
    // built once and reused.
    let dt = grid.dt(0);
    let gamma = build_gamma(model, domain, None, config.n, dt, &config.cf_quad)?;
    let gamma = match gamma {
        GammaSet::Single(g) => g,
        GammaSet::Split(_) => unreachable!(),
    };
    let mut sets = Vec::with_capacity(products.len());
    for product in products {
        sets.push(backward_induction_with_gamma(
            model, product, grid, domain, config, &gamma,
        )?);
    }

    // Shared basis pass: one T_j table per in-domain (path, time) point,
    // dotted against every product's coefficient sets.
    let m = ensemble.n_paths();
    let n_steps = grid.n_steps();
    let n_times = n_steps + 1;
    let ctx = payoff_context(model);
    let mut surfaces: Vec<PrecomputedSurface> = sets
        .iter()
        .map(|_| PrecomputedSurface {
            values: vec![0.0; n_times * m],
            conts: vec![0.0; n_times * m],
            m,
        })
        .collect();
    let mut basis = vec![0.0; config.n + 1];
    let mut basis_evals = 0u64;
    for u in 0..=n_times - 1 {
        let t = grid.times()[u];
        let xs = ensemble.row(u);
        for (i, &x) in xs.iter().enumerate() {
            let inside = domain.contains(x);
            if inside && u < n_steps {
                fill_basis(&mut basis, domain.to_unit(x));
                basis_evals += 1;
            }
            for (p, set) in sets.iter().enumerate() {
                let slot = u * m + i;
                if u == n_steps {
                    surfaces[p].values[slot] =
                        terminal_value(&set.product, &ctx, x).unwrap_or(0.0);
                    continue;
                }
                let frame = &set.frames[u];
                surfaces[p].values[slot] = if inside {
                    dot_basis(coeffs_of(&frame.value), &basis)
                } else {
                    eval_with_rule(&frame.value, domain, &set.rule, t, x)
                };
                if frame.role == StepRole::Decision {
                    let capprox = frame.continuation.as_ref().unwrap_or(&frame.value);
                    surfaces[p].conts[slot] = if inside {
                        dot_basis(coeffs_of(capprox), &basis)
                    } else {
                        eval_with_rule(capprox, domain, &set.rule, t, x)
                    };
                }
            }
        }
    }

    let mut out = Vec::with_capacity(products.len());
    for (p, product) in products.iter().enumerate() {
        out.push(exposure_from_surface(
            &surfaces[p],
            ensemble,
            product,
            model,
            config,
        )?);
    }
    Ok((out, SharedEvalStats { basis_evals }))
}

/// Per-step value/continuation tables backing the shared multi-product
/// evaluation.
struct PrecomputedSurface {
    values: Vec<f64>,
    conts: Vec<f64>,
    m: usize,
}

impl ValueSurface for PrecomputedSurface {
    fn values_into(&self, u: usize, xs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(xs.len(), self.m);
        out.copy_from_slice(&self.values[u * self.m..(u + 1) * self.m]);
    }

    fn continuations_into(&self, u: usize, xs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(xs.len(), self.m);
        out.copy_from_slice(&self.conts[u * self.m..(u + 1) * self.m]);
    }
}

fn coeffs_of(approx: &Approximant<f64>) -> &[f64] {
    match approx {
        Approximant::Single(a) => a.coeffs(),
        Approximant::Split(_) => unreachable!("multi-product sharing is unsplit"),
    }
}

fn fill_basis(basis: &mut [f64], z: f64) {
    basis[0] = 1.0;
    if basis.len() > 1 {
        basis[1] = z;
    }
    for j in 2..basis.len() {
        basis[j] = 2.0 * z * basis[j - 1] - basis[j - 2];
    }
}

fn dot_basis(coeffs: &[f64], basis: &[f64]) -> f64 {
    // Must accumulate in the same order as `eval_basis_dot` so shared and
    // single-product evaluation agree bitwise.
    let mut acc = coeffs[0];
    for j in 1..coeffs.len() {
        acc += coeffs[j] * basis[j];
    }
    acc
}

/// Induction with a caller-provided Gamma matrix (shared across products).
fn backward_induction_with_gamma(
    model: &ModelSpec,
    product: &ProductSpec,
    grid: &TimeGrid,
    domain: &Domain64,
    config: &EngineConfig,
    gamma: &MomentMatrix,
) -> Result<ValueFunctionSet, CoreError> {
    // The public entry rebuilds Gamma; this private variant re-runs the
    // same loop with the shared matrix by temporarily treating it as the
    // single-domain set.
    let roles = product.schedule_roles(grid)?;
    let ctx = payoff_context(model);
    let rule = ExtrapolationRule::resolve(config.extrapolation, product, model)?;
    let dt = grid.dt(0);
    let nodes = cheb_nodes(config.n, domain);
    let rates = model.rate_dynamics();
    let n_steps = grid.n_steps();
    let mut frames: Vec<Option<Frame>> = vec![None; n_steps + 1];

    let terminal: Result<Vec<f64>, CoreError> = nodes
        .iter()
        .map(|&x| terminal_value(product, &ctx, x))
        .collect();
    let term_fit = ChebApprox::fit(&terminal?, *domain)?;
    let mut coeffs = term_fit.coeffs().to_vec();
    frames[n_steps] = Some(Frame {
        value: Approximant::Single(term_fit),
        continuation: None,
        role: roles[n_steps],
    });

    let smoothing_active = config.smoothing && product.is_equity();
    for u in (0..n_steps).rev() {
        let t = grid.times()[u];
        let discounts: Vec<f64> = nodes.iter().map(|&x| (-dt * rates.rate(t, x)).exp()).collect();
        let mut cont = continuation_nodes(gamma, &coeffs, &discounts);
        if u == n_steps - 1 && smoothing_active {
            if let Some(exact) = one_step_european(model, product, dt, config)? {
                for (c, &x) in cont.iter_mut().zip(&nodes) {
                    *c = exact(x);
                }
            }
        }
        let mut values = Vec::with_capacity(nodes.len());
        for (&c, &x) in cont.iter().zip(&nodes) {
            let intrinsic = if roles[u] == StepRole::Decision {
                payoff(product, &ctx, t, x)?
            } else {
                0.0
            };
            values.push(crate::products::dp_combine(product, &ctx, t, intrinsic, c, x)?);
        }
        let value_fit = Approximant::Single(ChebApprox::fit(&values, *domain)?);
        let continuation_fit = if roles[u] == StepRole::Decision {
            Some(Approximant::Single(ChebApprox::fit(&cont, *domain)?))
        } else {
            None
        };
        coeffs = coeffs_of(&value_fit).to_vec();
        frames[u] = Some(Frame {
            value: value_fit,
            continuation: continuation_fit,
            role: roles[u],
        });
    }

    let frames: Vec<Frame> = frames.into_iter().map(Option::unwrap).collect();
    let mut set = ValueFunctionSet {
        grid: grid.clone(),
        domain: *domain,
        frames,
        product: product.clone(),
        ctx,
        rule,
        t0_price: 0.0,
    };
    set.t0_price = set.value_at(0, 0.0);
    Ok(set)
}

