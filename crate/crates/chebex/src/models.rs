//! Risk-factor dynamics and path simulation under the pricing measure Q
//! and the real-world measure P.
//!
//! Equity models carry the log-return `X_t = ln(S_t / S_0)` as the risk
//! factor; the Hull-White model carries the zero-mean OU state `x_t` with
//! short rate `r_t = alpha(t) + x_t`. All schemes sample the exact
//! transition law, so there is no discretization bias, and every path owns
//! its own counter-based RNG stream `(seed, path index)`: ensembles are
//! bit-identical for a given seed regardless of chunking or thread count.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::CoreError;

/// Probability measure of a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Measure {
    /// Pricing measure Q.
    RiskNeutral,
    /// Real-world measure P.
    RealWorld,
}

impl Measure {
    pub fn tag(&self) -> &'static str {
        match self {
            Measure::RiskNeutral => "Q",
            Measure::RealWorld => "P",
        }
    }
}

/// Black-Scholes parameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct BlackScholesParams {
    pub s0: f64,
    pub sigma: f64,
    pub r: f64,
    pub mu: f64,
}

impl BlackScholesParams {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.sigma <= 0.0 || self.s0 <= 0.0 {
            return Err(CoreError::InvalidParameter(
                "Black-Scholes requires sigma > 0 and s0 > 0".into(),
            ));
        }
        Ok(())
    }

    fn drift(&self, measure: Measure) -> f64 {
        match measure {
            Measure::RiskNeutral => self.r,
            Measure::RealWorld => self.mu,
        }
    }
}

/// Merton jump-diffusion parameters; jumps are `N(jump_mean, jump_std^2)`
/// arriving at Poisson rate `intensity`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MertonParams {
    pub s0: f64,
    pub sigma: f64,
    pub r: f64,
    pub mu: f64,
    pub jump_mean: f64,
    pub jump_std: f64,
    pub intensity: f64,
}

impl MertonParams {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.sigma <= 0.0 || self.s0 <= 0.0 || self.jump_std <= 0.0 || self.intensity < 0.0 {
            return Err(CoreError::InvalidParameter(
                "Merton requires sigma > 0, s0 > 0, jump_std > 0, intensity >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Compensator `lambda (e^{alpha + beta^2/2} - 1)` of the jump part.
    pub fn jump_compensator(&self) -> f64 {
        self.intensity * ((self.jump_mean + 0.5 * self.jump_std * self.jump_std).exp() - 1.0)
    }

    /// Diffusion log-drift `b` such that `E[S_t] = S_0 e^{drift t}`; the
    /// jump law is kept identical under both measures.
    pub fn log_drift(&self, measure: Measure) -> f64 {
        let drift = match measure {
            Measure::RiskNeutral => self.r,
            Measure::RealWorld => self.mu,
        };
        drift - 0.5 * self.sigma * self.sigma - self.jump_compensator()
    }
}

/// Hull-White (one factor) parameters under Q and P, with a flat initial
/// forward curve `f(0, t) = flat_forward`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct HullWhiteParams {
    pub a_q: f64,
    pub sigma_q: f64,
    pub a_p: f64,
    pub sigma_p: f64,
    pub flat_forward: f64,
}

impl HullWhiteParams {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.a_q <= 0.0 || self.sigma_q <= 0.0 || self.a_p <= 0.0 || self.sigma_p <= 0.0 {
            return Err(CoreError::InvalidParameter(
                "Hull-White requires positive reversion speeds and vols".into(),
            ));
        }
        Ok(())
    }

    fn mean_reversion(&self, measure: Measure) -> (f64, f64) {
        match measure {
            Measure::RiskNeutral => (self.a_q, self.sigma_q),
            Measure::RealWorld => (self.a_p, self.sigma_p),
        }
    }
}

/// Deterministic shift `alpha(t)` of the Hull-White short rate
/// `r_t = alpha(t) + x_t`, for the flat forward curve (Q parameters).
pub fn hw_alpha(t: f64, p: &HullWhiteParams) -> f64 {
    let (a, sigma) = (p.a_q, p.sigma_q);
    p.flat_forward + sigma * sigma / (2.0 * a * a) * (1.0 - (-a * t).exp()).powi(2)
}

/// Zero-coupon bond price `P(t, T)` in state `x_t = x`, from the affine
/// closed form consistent with `r_t = alpha(t) + x_t` and the flat
/// forward curve (Q parameters).
pub fn hw_zcb(x: f64, t: f64, maturity: f64, p: &HullWhiteParams) -> Result<f64, CoreError> {
    if maturity < t {
        return Err(CoreError::InvalidParameter(
            "hw_zcb requires maturity >= t".into(),
        ));
    }
    let (a, sigma) = (p.a_q, p.sigma_q);
    let tau = maturity - t;
    let b = (1.0 - (-a * tau).exp()) / a;
    // integral of alpha over [t, T] (flat-forward part plus adjustment)
    let j = tau - 2.0 / a * ((-a * t).exp() - (-a * maturity).exp())
        + 0.5 / a * ((-2.0 * a * t).exp() - (-2.0 * a * maturity).exp());
    let int_alpha = p.flat_forward * tau + sigma * sigma / (2.0 * a * a) * j;
    // variance of the integrated OU state over [t, T]
    let v = sigma * sigma / (a * a)
        * (tau + 2.0 / a * (-a * tau).exp() - 0.5 / a * (-2.0 * a * tau).exp() - 1.5 / a);
    Ok((-int_alpha - b * x + 0.5 * v).exp())
}

/// Simulation time grid `t_0 = 0 < t_1 < ... < t_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self, CoreError> {
        if times.len() < 2 || times[0] != 0.0 {
            return Err(CoreError::InvalidParameter(
                "time grid must start at 0 and contain at least two points".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) || times.iter().any(|t| !t.is_finite()) {
            return Err(CoreError::InvalidParameter(
                "time grid must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self { times })
    }

    /// Uniform grid with `steps_per_year * horizon` steps over `[0, horizon]`.
    pub fn uniform(horizon: f64, steps_per_year: usize) -> Result<Self, CoreError> {
        if horizon <= 0.0 || steps_per_year == 0 {
            return Err(CoreError::InvalidParameter(
                "grid requires horizon > 0 and steps_per_year > 0".into(),
            ));
        }
        let n = (steps_per_year as f64 * horizon).round().max(1.0) as usize;
        let times = (0..=n).map(|u| horizon * u as f64 / n as f64).collect();
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self, u: usize) -> f64 {
        self.times[u + 1] - self.times[u]
    }

    /// True when every step has the same width (to 1e-12 relative).
    pub fn is_uniform(&self) -> bool {
        let dt0 = self.dt(0);
        (0..self.n_steps()).all(|u| (self.dt(u) - dt0).abs() <= 1e-12 * dt0)
    }
}

/// Simulated risk-factor ensemble, stored time-major: `row(u)` is the
/// vector of all path values at grid time `t_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    values: Vec<f64>,
    n_paths: usize,
    measure: Measure,
    seed: u64,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// All path values at grid index `u`.
    pub fn row(&self, u: usize) -> &[f64] {
        &self.values[u * self.n_paths..(u + 1) * self.n_paths]
    }

    pub fn value(&self, path: usize, u: usize) -> f64 {
        self.values[u * self.n_paths + path]
    }

    /// CSV export (header: seed, measure, grid; one row per path). Floats
    /// are shortest round-trip, so import is bit-exact.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<(), CoreError> {
        writeln!(w, "seed,{}", self.seed)?;
        writeln!(w, "measure,{}", self.measure.tag())?;
        let times: Vec<String> = self.grid.times().iter().map(|t| format!("{t}")).collect();
        writeln!(w, "grid,{}", times.join(","))?;
        for i in 0..self.n_paths {
            let row: Vec<String> = (0..self.grid.times().len())
                .map(|u| format!("{}", self.value(i, u)))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads an ensemble written by [`Self::write_csv`].
    pub fn read_csv<R: std::io::BufRead>(r: R) -> Result<Self, CoreError> {
        let mut lines = r.lines();
        let mut expect = |name: &str| -> Result<String, CoreError> {
            let line = lines
                .next()
                .ok_or_else(|| CoreError::InvalidData("truncated ensemble file".into()))??;
            line.strip_prefix(&format!("{name},"))
                .map(str::to_string)
                .ok_or_else(|| CoreError::InvalidData(format!("expected '{name}' header")))
        };
        let seed: u64 = expect("seed")?
            .parse()
            .map_err(|_| CoreError::InvalidData("bad seed".into()))?;
        let measure = match expect("measure")?.as_str() {
            "Q" => Measure::RiskNeutral,
            "P" => Measure::RealWorld,
            other => {
                return Err(CoreError::InvalidData(format!("unknown measure '{other}'")));
            }
        };
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| CoreError::InvalidData(format!("bad float '{s}': {e}")))
        };
        let times: Vec<f64> = expect("grid")?
            .split(',')
            .map(parse)
            .collect::<Result<_, _>>()?;
        let grid = TimeGrid::new(times)?;
        let n_times = grid.times().len();
        let mut paths: Vec<Vec<f64>> = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let row: Vec<f64> = line.split(',').map(parse).collect::<Result<_, _>>()?;
            if row.len() != n_times {
                return Err(CoreError::InvalidData("path row length mismatch".into()));
            }
            paths.push(row);
        }
        let n_paths = paths.len();
        if n_paths == 0 {
            return Err(CoreError::InvalidData("ensemble has no paths".into()));
        }
        let mut values = vec![0.0; n_times * n_paths];
        for (i, row) in paths.iter().enumerate() {
            for (u, &v) in row.iter().enumerate() {
                values[u * n_paths + i] = v;
            }
        }
        Ok(Self {
            grid,
            values,
            n_paths,
            measure,
            seed,
        })
    }
}

const SIM_CHUNK: usize = 4096;

/// Drives a per-path Markov step function over the grid, chunked over
/// paths. `step(state, u, rng)` returns the state at `t_{u+1}`.
fn simulate_markov<F>(
    grid: &TimeGrid,
    n_paths: usize,
    measure: Measure,
    seed: u64,
    x0: f64,
    step: F,
) -> Result<PathEnsemble, CoreError>
where
    F: Fn(f64, usize, &mut ChaCha8Rng) -> f64 + Sync,
{
    if n_paths == 0 {
        return Err(CoreError::InvalidParameter(
            "simulation requires at least one path".into(),
        ));
    }
    let n_times = grid.times().len();
    let blocks: Vec<(usize, Vec<f64>)> = (0..n_paths.div_ceil(SIM_CHUNK))
        .into_par_iter()
        .map(|b| {
            let start = b * SIM_CHUNK;
            let len = SIM_CHUNK.min(n_paths - start);
            let mut rngs: Vec<ChaCha8Rng> = (0..len)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((start + i) as u64);
                    rng
                })
                .collect();
            let mut states = vec![x0; len];
            let mut block = vec![0.0; n_times * len];
            block[..len].copy_from_slice(&states);
            for u in 0..n_times - 1 {
                for i in 0..len {
                    states[i] = step(states[i], u, &mut rngs[i]);
                }
                block[(u + 1) * len..(u + 2) * len].copy_from_slice(&states);
            }
            (start, block)
        })
        .collect();

    let mut values = vec![0.0; n_times * n_paths];
    for (start, block) in blocks {
        let len = block.len() / n_times;
        for u in 0..n_times {
            values[u * n_paths + start..u * n_paths + start + len]
                .copy_from_slice(&block[u * len..(u + 1) * len]);
        }
    }
    Ok(PathEnsemble {
        grid: grid.clone(),
        values,
        n_paths,
        measure,
        seed,
    })
}

/// Simulates Black-Scholes log-returns with the exact lognormal scheme.
pub fn simulate_bs(
    params: &BlackScholesParams,
    measure: Measure,
    n_paths: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<PathEnsemble, CoreError> {
    params.validate()?;
    let drift = params.drift(measure) - 0.5 * params.sigma * params.sigma;
    let sigma = params.sigma;
    simulate_markov(grid, n_paths, measure, seed, 0.0, move |x, u, rng| {
        let dt = grid.dt(u);
        let z: f64 = StandardNormal.sample(rng);
        x + drift * dt + sigma * dt.sqrt() * z
    })
}

/// One exact Merton log-return increment; returns the increment and the
/// number of jumps drawn. With zero intensity no jump randomness is
/// consumed, so the draw layout coincides with the Black-Scholes scheme.
pub fn merton_increment(
    params: &MertonParams,
    measure: Measure,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, u64) {
    let z: f64 = StandardNormal.sample(rng);
    let mut inc = params.log_drift(measure) * dt + params.sigma * dt.sqrt() * z;
    let mut jumps = 0;
    if params.intensity > 0.0 {
        let n = Poisson::new(params.intensity * dt).unwrap().sample(rng) as u64;
        for _ in 0..n {
            let j: f64 = StandardNormal.sample(rng);
            inc += params.jump_mean + params.jump_std * j;
        }
        jumps = n;
    }
    (inc, jumps)
}

/// Simulates Merton jump-diffusion log-returns (exact compound-Poisson
/// scheme; the jump law is identical under both measures).
pub fn simulate_merton(
    params: &MertonParams,
    measure: Measure,
    n_paths: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<PathEnsemble, CoreError> {
    params.validate()?;
    let p = *params;
    simulate_markov(grid, n_paths, measure, seed, 0.0, move |x, u, rng| {
        x + merton_increment(&p, measure, grid.dt(u), rng).0
    })
}

/// Characteristic function of the Merton log-return `X_t` under Q.
pub fn merton_cf(z: Complex64, t: f64, params: &MertonParams) -> Complex64 {
    let b = params.log_drift(Measure::RiskNeutral);
    let i = Complex64::new(0.0, 1.0);
    let jump = (i * z * params.jump_mean - 0.5 * params.jump_std.powi(2) * z * z).exp() - 1.0;
    ((i * b * z - 0.5 * params.sigma.powi(2) * z * z + params.intensity * jump) * t).exp()
}

/// Simulates the Hull-White OU state `x_t` with the exact transition
/// `x_{t+dt} = x_t e^{-a dt} + N(0, sigma^2 (1 - e^{-2 a dt}) / 2a)`.
pub fn simulate_hw(
    params: &HullWhiteParams,
    measure: Measure,
    n_paths: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<PathEnsemble, CoreError> {
    params.validate()?;
    let (a, sigma) = params.mean_reversion(measure);
    simulate_markov(grid, n_paths, measure, seed, 0.0, move |x, u, rng| {
        let dt = grid.dt(u);
        let decay = (-a * dt).exp();
        let step_std = sigma * ((1.0 - decay * decay) / (2.0 * a)).sqrt();
        let z: f64 = StandardNormal.sample(rng);
        x * decay + step_std * z
    })
}

/// Spot-rate dynamics used for discounting.
#[derive(Debug, Clone, Copy)]
pub enum RateDynamics {
    /// Constant continuously compounded rate.
    Deterministic(f64),
    /// Short rate `r(t, x) = alpha(t) + x` driven by the simulated state.
    HullWhite(HullWhiteParams),
}

impl RateDynamics {
    /// Short rate at `(t, x)`.
    pub fn rate(&self, t: f64, x: f64) -> f64 {
        match self {
            RateDynamics::Deterministic(r) => *r,
            RateDynamics::HullWhite(p) => hw_alpha(t, p) + x,
        }
    }
}

/// Pathwise discount factors `D(0, t_u)`, time-major like the ensemble.
/// Stochastic rates use the left-point rule
/// `D(0, t_{u+1}) = D(0, t_u) exp(-dt r(t_u, x_{t_u}))`.
pub fn pathwise_discount(ensemble: &PathEnsemble, rates: &RateDynamics) -> Vec<f64> {
    let m = ensemble.n_paths();
    let n_times = ensemble.grid().times().len();
    let mut out = vec![0.0; n_times * m];
    out[..m].fill(1.0);
    let mut cur = vec![1.0; m];
    for u in 0..n_times - 1 {
        let t = ensemble.grid().times()[u];
        let dt = ensemble.grid().dt(u);
        match rates {
            RateDynamics::Deterministic(r) => {
                let f = (-r * dt).exp();
                for c in cur.iter_mut() {
                    *c *= f;
                }
            }
            RateDynamics::HullWhite(_) => {
                let row = ensemble.row(u);
                for (c, &x) in cur.iter_mut().zip(row) {
                    *c *= (-dt * rates.rate(t, x)).exp();
                }
            }
        }
        out[(u + 1) * m..(u + 2) * m].copy_from_slice(&cur);
    }
    out
}

/// Model dispatch carrying the parameters of one of the three supported
/// dynamics.
#[derive(Debug, Clone, Copy)]
pub enum ModelSpec {
    BlackScholes(BlackScholesParams),
    Merton(MertonParams),
    HullWhite(HullWhiteParams),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), CoreError> {
        match self {
            ModelSpec::BlackScholes(p) => p.validate(),
            ModelSpec::Merton(p) => p.validate(),
            ModelSpec::HullWhite(p) => p.validate(),
        }
    }

    /// Initial spot for equity models.
    pub fn spot(&self) -> Option<f64> {
        match self {
            ModelSpec::BlackScholes(p) => Some(p.s0),
            ModelSpec::Merton(p) => Some(p.s0),
            ModelSpec::HullWhite(_) => None,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ModelSpec::BlackScholes(_) => "black_scholes",
            ModelSpec::Merton(_) => "merton",
            ModelSpec::HullWhite(_) => "hull_white",
        }
    }

    /// Mean and standard deviation of the risk factor `X_T`.
    pub fn marginal_mean_std(&self, horizon: f64, measure: Measure) -> (f64, f64) {
        match self {
            ModelSpec::BlackScholes(p) => {
                let mean = (p.drift(measure) - 0.5 * p.sigma * p.sigma) * horizon;
                (mean, p.sigma * horizon.sqrt())
            }
            ModelSpec::Merton(p) => {
                let mean = (p.log_drift(measure) + p.intensity * p.jump_mean) * horizon;
                let var = (p.sigma * p.sigma
                    + p.intensity * (p.jump_mean * p.jump_mean + p.jump_std * p.jump_std))
                    * horizon;
                (mean, var.sqrt())
            }
            ModelSpec::HullWhite(p) => {
                let (a, sigma) = p.mean_reversion(measure);
                let var = sigma * sigma * (1.0 - (-2.0 * a * horizon).exp()) / (2.0 * a);
                (0.0, var.sqrt())
            }
        }
    }

    pub fn simulate(
        &self,
        measure: Measure,
        n_paths: usize,
        grid: &TimeGrid,
        seed: u64,
    ) -> Result<PathEnsemble, CoreError> {
        match self {
            ModelSpec::BlackScholes(p) => simulate_bs(p, measure, n_paths, grid, seed),
            ModelSpec::Merton(p) => simulate_merton(p, measure, n_paths, grid, seed),
            ModelSpec::HullWhite(p) => simulate_hw(p, measure, n_paths, grid, seed),
        }
    }

    /// Discounting dynamics implied by the model.
    pub fn rate_dynamics(&self) -> RateDynamics {
        match self {
            ModelSpec::BlackScholes(p) => RateDynamics::Deterministic(p.r),
            ModelSpec::Merton(p) => RateDynamics::Deterministic(p.r),
            ModelSpec::HullWhite(p) => RateDynamics::HullWhite(*p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::mean_and_se;

    fn bs() -> BlackScholesParams {
        BlackScholesParams {
            s0: 100.0,
            sigma: 0.25,
            r: 0.03,
            mu: 0.1,
        }
    }

    fn merton() -> MertonParams {
        MertonParams {
            s0: 100.0,
            sigma: 0.25,
            r: 0.03,
            mu: 0.1,
            jump_mean: -0.5,
            jump_std: 0.4,
            intensity: 0.4,
        }
    }

    fn hw() -> HullWhiteParams {
        HullWhiteParams {
            a_q: 0.02,
            sigma_q: 0.02,
            a_p: 0.015,
            sigma_p: 0.01,
            flat_forward: 0.01,
        }
    }

    #[test]
    fn bs_degenerate_vol_is_deterministic() {
        let mut p = bs();
        p.sigma = 1e-12;
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let e = simulate_bs(&p, Measure::RiskNeutral, 8, &grid, 1).unwrap();
        for i in 0..8 {
            assert!((e.value(i, 4) - p.r).abs() < 1e-9);
        }
    }

    #[test]
    fn bs_terminal_mean_matches_theory() {
        let p = bs();
        // Exact scheme: a single step to T = 1 has the same law as X_T.
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let e = simulate_bs(&p, Measure::RiskNeutral, 1_000_000, &grid, 7).unwrap();
        let (mean, se) = mean_and_se(e.row(1));
        let expect = p.r - 0.5 * p.sigma * p.sigma;
        assert!(
            (mean - expect).abs() < 4.0 * se,
            "mean {mean} vs {expect} (se {se})"
        );
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let grid = TimeGrid::uniform(0.5, 10).unwrap();
        let a = simulate_bs(&bs(), Measure::RealWorld, 1000, &grid, 9).unwrap();
        let b = simulate_bs(&bs(), Measure::RealWorld, 1000, &grid, 9).unwrap();
        assert_eq!(a, b);
        let c = simulate_hw(&hw(), Measure::RiskNeutral, 1000, &grid, 9).unwrap();
        let d = simulate_hw(&hw(), Measure::RiskNeutral, 1000, &grid, 9).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn measure_switch_shifts_bs_paths_by_drift_difference() {
        let p = bs();
        let grid = TimeGrid::uniform(1.0, 25).unwrap();
        let q = simulate_bs(&p, Measure::RiskNeutral, 64, &grid, 3).unwrap();
        let real = simulate_bs(&p, Measure::RealWorld, 64, &grid, 3).unwrap();
        for i in 0..64 {
            for (u, &t) in grid.times().iter().enumerate() {
                let shift = (p.mu - p.r) * t;
                assert!(
                    (real.value(i, u) - q.value(i, u) - shift).abs() < 1e-12,
                    "path {i}, time {t}"
                );
            }
        }
    }

    #[test]
    fn merton_without_jumps_reduces_to_bs() {
        let mut p = merton();
        p.intensity = 0.0;
        let grid = TimeGrid::uniform(1.0, 12).unwrap();
        let m = simulate_merton(&p, Measure::RiskNeutral, 256, &grid, 11).unwrap();
        let b = simulate_bs(&bs(), Measure::RiskNeutral, 256, &grid, 11).unwrap();
        for i in 0..256 {
            for u in 0..=12 {
                assert!((m.value(i, u) - b.value(i, u)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn merton_martingale_and_jump_count() {
        let p = merton();
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let e = simulate_merton(&p, Measure::RiskNeutral, 1_000_000, &grid, 21).unwrap();
        let discounted: Vec<f64> = e.row(1).iter().map(|x| x.exp()).collect();
        let (mean, se) = mean_and_se(&discounted);
        let expect = (p.r * 1.0_f64).exp();
        assert!(
            (mean - expect).abs() < 4.0 * se,
            "martingale: {mean} vs {expect} (se {se})"
        );

        // Poisson count over one long step.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let counts: Vec<f64> = (0..n)
            .map(|_| merton_increment(&p, Measure::RiskNeutral, 1.0, &mut rng).1 as f64)
            .collect();
        let (mean_jumps, se_jumps) = mean_and_se(&counts);
        assert!(
            (mean_jumps - p.intensity).abs() < 4.0 * se_jumps,
            "jump rate {mean_jumps} vs {}",
            p.intensity
        );
    }

    #[test]
    fn merton_cf_basics() {
        let p = merton();
        assert!((merton_cf(Complex64::new(0.0, 0.0), 1.0, &p) - 1.0).norm() < 1e-15);

        let mut nolambda = p;
        nolambda.intensity = 0.0;
        let z = Complex64::new(1.7, 0.0);
        let b = nolambda.log_drift(Measure::RiskNeutral);
        let gauss = (Complex64::new(0.0, 1.0) * b * z - 0.5 * p.sigma * p.sigma * z * z).exp();
        assert!((merton_cf(z, 1.0, &nolambda) - gauss).norm() < 1e-14);

        for i in 0..100 {
            let z = Complex64::new(-50.0 + i as f64, 0.0);
            assert!(merton_cf(z, 0.7, &p).norm() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn hw_degenerate_vol_stays_at_zero() {
        let mut p = hw();
        p.sigma_q = 1e-12;
        let grid = TimeGrid::uniform(2.0, 10).unwrap();
        let e = simulate_hw(&p, Measure::RiskNeutral, 16, &grid, 2).unwrap();
        for i in 0..16 {
            for u in 0..=20 {
                assert!(e.value(i, u).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hw_terminal_variance_matches_theory() {
        let p = hw();
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let e = simulate_hw(&p, Measure::RiskNeutral, 1_000_000, &grid, 31).unwrap();
        let xs = e.row(1);
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let (m2, se) = mean_and_se(&sq);
        let expect = p.sigma_q * p.sigma_q * (1.0 - (-2.0 * p.a_q).exp()) / (2.0 * p.a_q);
        assert!(
            (m2 - expect).abs() < 4.0 * se,
            "var {m2} vs {expect} (se {se})"
        );
    }

    #[test]
    fn hw_exact_transition_has_no_grid_bias() {
        // Two-sample Kolmogorov-Smirnov on x_T from coarse vs fine grids.
        let p = hw();
        let coarse = simulate_hw(
            &p,
            Measure::RiskNeutral,
            100_000,
            &TimeGrid::uniform(1.0, 25).unwrap(),
            41,
        )
        .unwrap();
        let fine = simulate_hw(
            &p,
            Measure::RiskNeutral,
            100_000,
            &TimeGrid::uniform(1.0, 50).unwrap(),
            42,
        )
        .unwrap();
        let mut a: Vec<f64> = coarse.row(25).to_vec();
        let mut b: Vec<f64> = fine.row(50).to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            let diff = (i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs();
            d = d.max(diff);
        }
        let critical =
            1.628 * ((a.len() + b.len()) as f64 / (a.len() as f64 * b.len() as f64)).sqrt();
        assert!(d < critical, "KS statistic {d} exceeds 1% critical {critical}");
    }

    #[test]
    fn hw_alpha_limits() {
        let p = hw();
        assert_eq!(hw_alpha(0.0, &p), p.flat_forward);
        let limit = p.flat_forward + p.sigma_q * p.sigma_q / (2.0 * p.a_q * p.a_q);
        assert!((hw_alpha(1e6, &p) - limit).abs() < 1e-12);
        // Independent re-evaluation of the closed form at t = 5.
        let t = 5.0;
        let direct =
            0.01 + 0.0004 / (2.0 * 0.0004) * (1.0 - (-0.02f64 * t).exp()).powi(2);
        assert!((hw_alpha(t, &p) - direct).abs() < 1e-15);
    }

    #[test]
    fn hw_zcb_degenerate_cases() {
        let p = hw();
        assert!((hw_zcb(0.3, 2.0, 2.0, &p).unwrap() - 1.0).abs() < 1e-15);
        let mut flat = p;
        flat.sigma_q = 1e-12;
        let price = hw_zcb(0.0, 0.0, 4.0, &flat).unwrap();
        assert!((price - (-0.04f64).exp()).abs() < 1e-12);
        assert!(hw_zcb(0.0, 2.0, 1.0, &p).is_err());
    }

    #[test]
    fn hw_zcb_matches_monte_carlo_bond() {
        let p = hw();
        let grid = TimeGrid::uniform(5.0, 50).unwrap();
        let e = simulate_hw(&p, Measure::RiskNeutral, 100_000, &grid, 17).unwrap();
        let d = pathwise_discount(&e, &RateDynamics::HullWhite(p));
        let m = e.n_paths();
        let terminal = &d[grid.n_steps() * m..];
        let (mean, se) = mean_and_se(terminal);
        let analytic = hw_zcb(0.0, 0.0, 5.0, &p).unwrap();
        // The left-point rule carries O(dt) bias; allow it alongside 4 se.
        assert!(
            (mean - analytic).abs() < 4.0 * se + 2e-4,
            "bond {mean} vs {analytic} (se {se})"
        );
    }

    #[test]
    fn deterministic_discount_matches_exponential() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let e = simulate_bs(&bs(), Measure::RiskNeutral, 4, &grid, 1).unwrap();
        let d = pathwise_discount(&e, &RateDynamics::Deterministic(0.03));
        for i in 0..4 {
            assert!((d[2 * 4 + i] - 0.970446).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_vol_hw_discount_is_alpha_integral() {
        let mut p = hw();
        p.sigma_q = 1e-14;
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let e = simulate_hw(&p, Measure::RiskNeutral, 3, &grid, 6).unwrap();
        let d = pathwise_discount(&e, &RateDynamics::HullWhite(p));
        let mut expect = 1.0;
        for u in 0..10 {
            expect *= (-grid.dt(u) * hw_alpha(grid.times()[u], &p)).exp();
        }
        for i in 0..3 {
            assert!((d[10 * 3 + i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn discounts_non_increasing_for_positive_rates() {
        let mut p = hw();
        p.sigma_q = 0.001; // keep rates positive over the horizon
        let grid = TimeGrid::uniform(2.0, 20).unwrap();
        let e = simulate_hw(&p, Measure::RiskNeutral, 500, &grid, 13).unwrap();
        let d = pathwise_discount(&e, &RateDynamics::HullWhite(p));
        let m = e.n_paths();
        for i in 0..m {
            for u in 0..grid.n_steps() {
                assert!(d[(u + 1) * m + i] <= d[u * m + i] + 1e-15);
            }
        }
    }

    #[test]
    fn ensemble_csv_round_trip_is_bit_exact() {
        let grid = TimeGrid::uniform(0.3, 5).unwrap();
        let e = simulate_merton(&merton(), Measure::RealWorld, 37, &grid, 123).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let back = PathEnsemble::read_csv(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(e, back);
    }

    #[test]
    fn marginal_moments_are_consistent_with_simulation() {
        let model = ModelSpec::Merton(merton());
        let (mean, std) = model.marginal_mean_std(1.0, Measure::RiskNeutral);
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let e = model
            .simulate(Measure::RiskNeutral, 400_000, &grid, 77)
            .unwrap();
        let (m, se) = mean_and_se(e.row(1));
        assert!((m - mean).abs() < 4.0 * se);
        let sq: Vec<f64> = e.row(1).iter().map(|x| (x - mean) * (x - mean)).collect();
        let (v, vse) = mean_and_se(&sq);
        assert!((v - std * std).abs() < 4.0 * vse);
    }
}
