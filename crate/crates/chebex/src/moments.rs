//! Conditional expectations of the Chebyshev basis one time step ahead.
//!
//! The backward induction consumes the matrix
//! `Gamma[k][j] = E^Q[ T_j(tau^{-1}(X_dt)) 1_D(X_dt) | X_0 = x_k ]`
//! where `x_k` are the Chebyshev nodes of the interpolation domain `D`.
//! Three construction routes are provided:
//!
//! - analytic, for conditionally normal transitions, via the recursion for
//!   truncated generalized moments `mu_j = E[T_j(Y) 1_{[-1,1]}(Y)]` of a
//!   normal variable;
//! - characteristic-function quadrature (COS density recovery plus
//!   Clenshaw-Curtis integration), for jump models;
//! - Monte Carlo, as a slow oracle / fallback.
//!
//! Rows are stored contiguously per starting node because the induction
//! consumes whole rows (dot products against the coefficient vector).

use num_complex::Complex64;
use rayon::prelude::*;

use crate::chebyshev::{cheb_nodes, clenshaw, Domain};
use crate::error::CoreError;
use crate::math::{gauss_legendre, norm_cdf, norm_pdf};
use crate::Domain64;

/// Hard cap on the moment-recursion order.
pub const MAX_MOMENT_ORDER: usize = 2048;

/// Truncated generalized moments of a normal variable `Y ~ N(mean, std^2)`:
/// `mu[j] = E[T_j(Y) 1_{[-1,1]}(Y)]` and the derivative moments
/// `mu_prime[j] = E[T_j'(Y) 1_{[-1,1]}(Y)]`.
#[derive(Debug, Clone)]
pub struct TruncatedMomentSequence {
    pub mu: Vec<f64>,
    pub mu_prime: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Recursion guard. The forward recursion couples every `mu_{n+1}` to all
/// earlier moments through `mu'_n = 2n sum' mu_j`, and roundoff injected at
/// step `j` is re-amplified by that sum at every later step. Measured
/// against 50-digit arithmetic, the double-precision error stays below
/// ~1e-11 only inside roughly `n <= 32` and `std * n <= 1.25`
/// (worst case sits at means near the truncation edge); beyond that box it
/// grows without bound, reaching 1e+11 already at `std = 0.035, n = 128`.
/// Outside the box the quadrature route is used instead. The mean may
/// exceed `[-1, 1]` only by a margin keeping the Chebyshev-recurrence
/// growth factor `(|m| + sqrt(m^2 - 1))^n` below ~e^7, and very small std
/// (density nearly singular at the truncation edge) also goes to
/// quadrature.
fn recursion_is_stable(mean: f64, std: f64, n: usize) -> bool {
    if std < 1e-4 || n > 32 || std * n as f64 > 1.25 {
        return false;
    }
    let budget = 7.0 / (n.max(8) as f64);
    mean.abs() <= 1.0 + 0.5 * budget * budget
}

/// Truncated generalized moments by the analytic recursion, with a
/// quadrature fallback outside the recursion's stability region.
pub fn truncated_normal_cheb_moments(
    mean: f64,
    std: f64,
    n: usize,
) -> Result<TruncatedMomentSequence, CoreError> {
    if std <= 0.0 || !std.is_finite() || !mean.is_finite() {
        return Err(CoreError::InvalidParameter(
            "truncated moments require finite mean and std > 0".into(),
        ));
    }
    if n < 1 {
        return Err(CoreError::InvalidParameter(
            "truncated moments require order n >= 1".into(),
        ));
    }
    if n > MAX_MOMENT_ORDER {
        return Err(CoreError::SizeLimit(format!(
            "moment order {n} exceeds {MAX_MOMENT_ORDER}"
        )));
    }

    let mu = if recursion_is_stable(mean, std, n) {
        moments_by_recursion(mean, std, n)
    } else {
        moments_by_quadrature(mean, std, n, 1e-12)
    };
    let mu_prime = derivative_moments(&mu);
    Ok(TruncatedMomentSequence {
        mu,
        mu_prime,
        mean,
        std,
    })
}

/// The forward recursion of the truncated moments:
/// `mu_{n+1} = 2 m mu_n - 2 s^2 (f(1) - f(-1) T_n(-1) - mu'_n) - mu_{n-1}`
/// with `mu'_n = 2n sum'_{j<n, (n+j) odd} mu_j` (first term halved).
fn moments_by_recursion(mean: f64, std: f64, n: usize) -> Vec<f64> {
    let f1 = norm_pdf(1.0, mean, std);
    let fm1 = norm_pdf(-1.0, mean, std);
    let var = std * std;

    let mut mu = Vec::with_capacity(n + 1);
    mu.push(norm_cdf(1.0, mean, std) - norm_cdf(-1.0, mean, std));
    mu.push(mean * mu[0] - var * (f1 - fm1));

    // Parity-partial sums over j < current n, with the j = 0 term halved.
    let mut even_sum = 0.5 * mu[0];
    let mut odd_sum = 0.0;
    for k in 1..n {
        // mu'_k over j <= k-1: opposite-parity bucket.
        let mu_prime_k = 2.0 * k as f64 * if k % 2 == 0 { odd_sum } else { even_sum };
        let t_k_minus1 = if k % 2 == 0 { 1.0 } else { -1.0 };
        let next = 2.0 * mean * mu[k] - 2.0 * var * (f1 - fm1 * t_k_minus1 - mu_prime_k) - mu[k - 1];
        if k % 2 == 0 {
            even_sum += mu[k];
        } else {
            odd_sum += mu[k];
        }
        mu.push(next);
    }
    mu
}

/// Derivative moments from the mu sequence:
/// `mu'_{n+1} = 2 (n+1) sum'_{j<=n, (n+j) even} mu_j` (first term halved).
fn derivative_moments(mu: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(mu.len());
    out.push(0.0);
    let mut even_sum = 0.5 * mu[0];
    let mut odd_sum = 0.0;
    for k in 1..mu.len() {
        // Here the bucket parity matches n = k - 1.
        let same = if (k - 1) % 2 == 0 { even_sum } else { odd_sum };
        out.push(2.0 * k as f64 * same);
        if k % 2 == 0 {
            even_sum += mu[k];
        } else {
            odd_sum += mu[k];
        }
    }
    out
}

/// Truncated moments by composite Gauss-Legendre quadrature in the angle
/// variable, with panel doubling until `tol` self-consistency.
///
/// This is deliberately independent of the recursion: it integrates
/// `cos(j theta) f(cos theta) sin theta` over the image of the effective
/// support window, so it stays accurate both for spiky (small std) and
/// oscillatory (large order) integrands.
pub fn moments_by_quadrature(mean: f64, std: f64, n: usize, tol: f64) -> Vec<f64> {
    let lo = (mean - 14.0 * std).max(-1.0);
    let hi = (mean + 14.0 * std).min(1.0);
    if lo >= hi {
        return vec![0.0; n + 1];
    }
    // y = cos(theta); descending y maps to ascending theta.
    let theta_lo = hi.acos();
    let theta_hi = lo.acos();

    let mut panels = ((n as f64 * (theta_hi - theta_lo) / std::f64::consts::PI).ceil() as usize)
        .max(8);
    let mut prev = quad_pass(mean, std, n, theta_lo, theta_hi, panels);
    loop {
        panels *= 2;
        let next = quad_pass(mean, std, n, theta_lo, theta_hi, panels);
        let diff = prev
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        prev = next;
        if diff <= tol || panels >= 1 << 14 {
            return prev;
        }
    }
}

fn quad_pass(mean: f64, std: f64, n: usize, theta_lo: f64, theta_hi: f64, panels: usize) -> Vec<f64> {
    let (nodes, weights) = gauss_legendre(16);
    let h = (theta_hi - theta_lo) / panels as f64;
    let mut acc = vec![0.0; n + 1];
    for p in 0..panels {
        let mid = theta_lo + (p as f64 + 0.5) * h;
        for (z, w) in nodes.iter().zip(&weights) {
            let theta = mid + 0.5 * h * z;
            let (sin_t, cos_t) = theta.sin_cos();
            let weight = 0.5 * h * w * norm_pdf(cos_t, mean, std) * sin_t;
            // cos(j theta) via the cosine addition recurrence.
            let (sin1, cos1) = theta.sin_cos();
            let mut c_prev = 1.0; // cos(0)
            let mut s_prev = 0.0; // sin(0)
            for a in acc.iter_mut() {
                *a += weight * c_prev;
                let c_next = c_prev * cos1 - s_prev * sin1;
                s_prev = s_prev * cos1 + c_prev * sin1;
                c_prev = c_next;
            }
        }
    }
    acc
}

/// Pre-computed conditional expectations of the Chebyshev basis over one
/// time step, one row per starting node.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatrix {
    gamma: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
    domain: Domain64,
    dt: f64,
    model_tag: String,
}

impl MomentMatrix {
    fn new(
        gamma: Vec<f64>,
        n_rows: usize,
        n_cols: usize,
        domain: Domain64,
        dt: f64,
        model_tag: impl Into<String>,
    ) -> Result<Self, CoreError> {
        debug_assert_eq!(gamma.len(), n_rows * n_cols);
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(CoreError::Numerical(
                "moment matrix contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            gamma,
            n_rows,
            n_cols,
            domain,
            dt,
            model_tag: model_tag.into(),
        })
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.gamma[k * self.n_cols..(k + 1) * self.n_cols]
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn domain(&self) -> &Domain64 {
        &self.domain
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    /// Writes the matrix as CSV with a small header; floats are printed in
    /// shortest round-trip form so a re-load is bit-exact.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<(), CoreError> {
        writeln!(w, "model_tag,{}", self.model_tag)?;
        writeln!(w, "domain,{},{}", self.domain.lower(), self.domain.upper())?;
        writeln!(w, "dt,{}", self.dt)?;
        writeln!(w, "shape,{},{}", self.n_rows, self.n_cols)?;
        for k in 0..self.n_rows {
            let row: Vec<String> = self.row(k).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads a matrix written by [`Self::write_csv`].
    pub fn read_csv<R: std::io::BufRead>(r: R) -> Result<Self, CoreError> {
        let mut lines = r.lines();
        let mut header = |name: &str| -> Result<Vec<String>, CoreError> {
            let line = lines
                .next()
                .ok_or_else(|| CoreError::InvalidData("truncated moment-matrix file".into()))??;
            let mut parts = line.split(',');
            let key = parts.next().unwrap_or_default();
            if key != name {
                return Err(CoreError::InvalidData(format!(
                    "expected header '{name}', found '{key}'"
                )));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let tag = header("model_tag")?.join(",");
        let dom = header("domain")?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| CoreError::InvalidData(format!("bad float '{s}': {e}")))
        };
        let domain = Domain::new(parse(&dom[0])?, parse(&dom[1])?)?;
        let dt = parse(&header("dt")?[0])?;
        let shape = header("shape")?;
        let n_rows: usize = shape[0]
            .parse()
            .map_err(|_| CoreError::InvalidData("bad shape".into()))?;
        let n_cols: usize = shape[1]
            .parse()
            .map_err(|_| CoreError::InvalidData("bad shape".into()))?;
        let mut gamma = Vec::with_capacity(n_rows * n_cols);
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            for field in line.split(',') {
                gamma.push(parse(field)?);
            }
        }
        if gamma.len() != n_rows * n_cols {
            return Err(CoreError::InvalidData(format!(
                "expected {} entries, found {}",
                n_rows * n_cols,
                gamma.len()
            )));
        }
        Self::new(gamma, n_rows, n_cols, domain, dt, tag)
    }
}

/// Gamma block for arbitrary starting points and a destination domain,
/// for a conditionally normal step `X' | X = x_k ~ N(step_means[k], variance)`.
///
/// The transform of Prop-style conditional moments: with
/// `Y = tau_dst^{-1}(X')`, `Y ~ N(1 - 2 (upper - m_k)/w, (2/w)^2 variance)`,
/// so each row is a truncated-moment sequence of the mapped normal.
pub fn normal_moment_block(
    dst: &Domain64,
    step_means: &[f64],
    variance: f64,
    n_cols_degree: usize,
    dt: f64,
    tag: &str,
) -> Result<MomentMatrix, CoreError> {
    if variance <= 0.0 || !variance.is_finite() {
        return Err(CoreError::InvalidParameter(
            "normal moment matrix requires variance > 0".into(),
        ));
    }
    let w = dst.width();
    let y_std = 2.0 / w * variance.sqrt();
    let rows: Result<Vec<Vec<f64>>, CoreError> = step_means
        .par_iter()
        .map(|&m| {
            let y_mean = 1.0 - 2.0 * (dst.upper() - m) / w;
            Ok(truncated_normal_cheb_moments(y_mean, y_std, n_cols_degree)?.mu)
        })
        .collect();
    let gamma: Vec<f64> = rows?.into_iter().flatten().collect();
    MomentMatrix::new(
        gamma,
        step_means.len(),
        n_cols_degree + 1,
        *dst,
        dt,
        tag,
    )
}

/// Square Gamma matrix for an additive normal step
/// `X_dt | X_0 = x ~ N(x + drift, variance)` on `domain`.
pub fn normal_moment_matrix(
    domain: &Domain64,
    drift: f64,
    variance: f64,
    n: usize,
    dt: f64,
    tag: &str,
) -> Result<MomentMatrix, CoreError> {
    let means: Vec<f64> = cheb_nodes(n, domain).iter().map(|x| x + drift).collect();
    normal_moment_block(domain, &means, variance, n, dt, tag)
}

/// Quadrature configuration for the characteristic-function route.
#[derive(Debug, Clone)]
pub struct QuadratureConfig {
    /// Number of cosine terms in the density recovery.
    pub n_cos: usize,
    /// Cumulant-based truncation multiplier L.
    pub range_l: f64,
    /// Clenshaw-Curtis points as a multiple of (N+1).
    pub cc_factor: usize,
    /// Floor on the Clenshaw-Curtis point count.
    pub cc_min: usize,
    /// Agreement required between the base and doubled quadrature.
    pub self_check_tol: f64,
    /// Largest admissible |cf| at the highest recovered frequency.
    pub cf_tail_tol: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            n_cos: 1 << 10,
            range_l: 10.0,
            cc_factor: 4,
            cc_min: 1024,
            self_check_tol: 1e-9,
            cf_tail_tol: 1e-6,
        }
    }
}

/// First, second and fourth cumulants of a distribution given its
/// characteristic function, by central differences of `ln cf` near zero.
pub fn cf_cumulants(cf: &dyn Fn(f64) -> Complex64) -> (f64, f64, f64) {
    // Pick the step so that |ln cf(2h)| stays well below pi (the complex
    // log is principal-branch: a wrapped phase would corrupt the odd
    // cumulants) while staying large enough for the differences to be
    // well scaled.
    let mut h = 1.0;
    for _ in 0..60 {
        let g = cf(2.0 * h).ln().norm();
        if g > 0.5 {
            h *= 0.5;
        } else if g < 5e-3 {
            h *= 2.0;
        } else {
            break;
        }
    }
    let g = |z: f64| cf(z).ln();
    let (g1, g2) = (g(h), g(2.0 * h));
    let (gm1, gm2) = (g(-h), g(-2.0 * h));
    let c1 = (8.0 * (g1.im - gm1.im) - (g2.im - gm2.im)) / (12.0 * h);
    let c2 = -(16.0 * (g1.re + gm1.re) - (g2.re + gm2.re)) / (12.0 * h * h);
    let c4 = (g2.re + gm2.re - 4.0 * (g1.re + gm1.re)) / h.powi(4);
    (c1, c2, c4)
}

/// Density of the increment on `[a, b]` recovered from the characteristic
/// function as a cosine series (COS expansion).
struct CosDensity {
    a: f64,
    b: f64,
    /// Chebyshev-form coefficients: q(u) = clenshaw(coeffs, cos(pi (u-a)/(b-a))).
    coeffs: Vec<f64>,
}

impl CosDensity {
    fn from_cf(cf: &dyn Fn(f64) -> Complex64, cfg: &QuadratureConfig) -> Result<Self, CoreError> {
        let (c1, c2, c4) = cf_cumulants(cf);
        let half_width = (cfg.range_l * (c2 + c4.max(0.0).sqrt()).sqrt()).max(1e-4 * (1.0 + c1.abs()));
        let (a, b) = (c1 - half_width, c1 + half_width);
        let scale = std::f64::consts::PI / (b - a);
        let tail = cf((cfg.n_cos - 1) as f64 * scale).norm();
        if tail > cfg.cf_tail_tol {
            return Err(CoreError::Numerical(format!(
                "characteristic function does not decay: |cf| = {tail:.3e} at the highest \
                 recovered frequency (n_cos = {}, range = [{a:.4}, {b:.4}])",
                cfg.n_cos
            )));
        }
        let mut coeffs: Vec<f64> = (0..cfg.n_cos)
            .map(|m| {
                let u = m as f64 * scale;
                let phi = cf(u);
                2.0 / (b - a) * (phi * Complex64::new(0.0, -u * a).exp()).re
            })
            .collect();
        coeffs[0] *= 0.5;
        Ok(Self { a, b, coeffs })
    }

    /// Density value; zero outside the recovery interval (the cosine
    /// series is periodic there and must not be used).
    fn eval(&self, u: f64) -> f64 {
        if u < self.a || u > self.b {
            return 0.0;
        }
        let z = (std::f64::consts::PI * (u - self.a) / (self.b - self.a)).cos();
        clenshaw(&self.coeffs, z)
    }
}

/// Gamma block from a characteristic function of the one-step increment:
/// `Gamma[k][j] = int T_j(tau_dst^{-1}(y)) q_dt(y - x_k) dy` over the
/// destination domain, by Clenshaw-Curtis quadrature against the
/// COS-recovered density. The quadrature is run twice (base and doubled
/// point count) and must self-agree to the configured tolerance.
pub fn cf_moment_block(
    cf: &dyn Fn(f64) -> Complex64,
    src_points: &[f64],
    dst: &Domain64,
    n_cols_degree: usize,
    dt: f64,
    cfg: &QuadratureConfig,
    tag: &str,
) -> Result<MomentMatrix, CoreError> {
    let density = CosDensity::from_cf(cf, cfg)?;
    let q_base = (cfg.cc_factor * (n_cols_degree + 1)).max(cfg.cc_min);

    let base = cc_gamma_pass(&density, src_points, dst, n_cols_degree, q_base);
    let fine = cc_gamma_pass(&density, src_points, dst, n_cols_degree, 2 * q_base);
    let diff = base
        .iter()
        .zip(&fine)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    if diff > cfg.self_check_tol {
        return Err(CoreError::Numerical(format!(
            "cf moment quadrature self-check failed: max change {diff:.3e} between {} and {} \
             Clenshaw-Curtis points (tolerance {:.1e})",
            q_base,
            2 * q_base,
            cfg.self_check_tol
        )));
    }
    MomentMatrix::new(fine, src_points.len(), n_cols_degree + 1, *dst, dt, tag)
}

/// Square Gamma matrix from a characteristic function on `domain`.
pub fn cf_moment_matrix(
    cf: &dyn Fn(f64) -> Complex64,
    domain: &Domain64,
    n: usize,
    dt: f64,
    cfg: &QuadratureConfig,
    tag: &str,
) -> Result<MomentMatrix, CoreError> {
    let nodes = cheb_nodes(n, domain);
    cf_moment_block(cf, &nodes, domain, n, dt, cfg, tag)
}

/// One Clenshaw-Curtis pass over all rows; `q` quadrature intervals.
fn cc_gamma_pass(
    density: &CosDensity,
    src_points: &[f64],
    dst: &Domain64,
    degree: usize,
    q: usize,
) -> Vec<f64> {
    // Clenshaw-Curtis nodes y_m = tau_dst(cos(pi m / q)) and weights; the
    // unit-domain basis values T_j(cos(pi m / q)) = cos(pi j m / q) are
    // shared by every row.
    let zs: Vec<f64> = (0..=q)
        .map(|m| (std::f64::consts::PI * m as f64 / q as f64).cos())
        .collect();
    let ys: Vec<f64> = zs.iter().map(|&z| dst.from_unit(z)).collect();
    let wts = cc_weights(q, 0.5 * dst.width());

    let n_cols = degree + 1;
    let rows: Vec<Vec<f64>> = src_points
        .par_iter()
        .map(|&x_k| {
            let mut acc = vec![0.0; n_cols];
            for (m, (&y, &w)) in ys.iter().zip(&wts).enumerate() {
                let qv = w * density.eval(y - x_k);
                if qv == 0.0 {
                    continue;
                }
                // T_j at this node via the cosine recurrence on z_m.
                let z = zs[m];
                let mut t_prev = 1.0;
                let mut t_cur = z;
                acc[0] += qv;
                if n_cols > 1 {
                    acc[1] += qv * z;
                }
                for a in acc.iter_mut().skip(2) {
                    let t_next = 2.0 * z * t_cur - t_prev;
                    t_prev = t_cur;
                    t_cur = t_next;
                    *a += qv * t_cur;
                }
            }
            acc
        })
        .collect();
    rows.into_iter().flatten().collect()
}

/// Clenshaw-Curtis weights for `q + 1` nodes `cos(pi m / q)`, scaled by the
/// half-width of the target interval.
fn cc_weights(q: usize, half_width: f64) -> Vec<f64> {
    let mut w = vec![0.0; q + 1];
    for (m, wm) in w.iter_mut().enumerate() {
        let theta = std::f64::consts::PI * m as f64 / q as f64;
        let mut acc = 1.0;
        for j in 1..=q / 2 {
            let factor = if 2 * j == q { 1.0 } else { 2.0 };
            acc -= factor * (2.0 * j as f64 * theta).cos() / (4.0 * j as f64 * j as f64 - 1.0);
        }
        let endpoint = if m == 0 || m == q { 0.5 } else { 1.0 };
        *wm = endpoint * 2.0 * acc / q as f64 * half_width;
    }
    w
}

/// Monte Carlo Gamma estimate: `Gamma[k][j] ~ mean_i p_j(x_k + u_i)` with a
/// shared increment sample `u_i` drawn once from `seed`. Returns the
/// estimate together with per-entry standard errors.
pub fn mc_moment_block_with_se(
    increments: &[f64],
    src_points: &[f64],
    dst: &Domain64,
    degree: usize,
    dt: f64,
    tag: &str,
) -> Result<(MomentMatrix, Vec<f64>), CoreError> {
    if increments.len() < 1000 {
        return Err(CoreError::InvalidParameter(
            "Monte Carlo moment matrix requires at least 1000 samples".into(),
        ));
    }
    let n_cols = degree + 1;
    let n = increments.len() as f64;
    let per_row: Vec<(Vec<f64>, Vec<f64>)> = src_points
        .par_iter()
        .map(|&x_k| {
            let mut sum = vec![0.0; n_cols];
            let mut sum_sq = vec![0.0; n_cols];
            for &u in increments {
                let y = x_k + u;
                if !dst.contains(y) {
                    continue;
                }
                let z = dst.to_unit(y);
                let mut t_prev = 1.0;
                let mut t_cur = z;
                sum[0] += 1.0;
                sum_sq[0] += 1.0;
                if n_cols > 1 {
                    sum[1] += z;
                    sum_sq[1] += z * z;
                }
                for j in 2..n_cols {
                    let t_next = 2.0 * z * t_cur - t_prev;
                    t_prev = t_cur;
                    t_cur = t_next;
                    sum[j] += t_cur;
                    sum_sq[j] += t_cur * t_cur;
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let se: Vec<f64> = sum_sq
                .iter()
                .zip(&mean)
                .map(|(&sq, &m)| (((sq / n - m * m).max(0.0)) / n).sqrt())
                .collect();
            (mean, se)
        })
        .collect();
    let mut gamma = Vec::with_capacity(src_points.len() * n_cols);
    let mut se = Vec::with_capacity(src_points.len() * n_cols);
    for (m, s) in per_row {
        gamma.extend(m);
        se.extend(s);
    }
    Ok((
        MomentMatrix::new(gamma, src_points.len(), n_cols, *dst, dt, tag)?,
        se,
    ))
}

/// Square Monte Carlo Gamma matrix with increments drawn from `sampler`,
/// deterministic in `seed`.
pub fn mc_moment_matrix<S>(
    mut sampler: S,
    domain: &Domain64,
    n: usize,
    n_samples: usize,
    seed: u64,
    dt: f64,
    tag: &str,
) -> Result<MomentMatrix, CoreError>
where
    S: FnMut(&mut rand_chacha::ChaCha8Rng) -> f64,
{
    use rand::SeedableRng;
    if n_samples < 1000 {
        return Err(CoreError::InvalidParameter(
            "Monte Carlo moment matrix requires at least 1000 samples".into(),
        ));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let increments: Vec<f64> = (0..n_samples).map(|_| sampler(&mut rng)).collect();
    let nodes = cheb_nodes(n, domain);
    mc_moment_block_with_se(&increments, &nodes, domain, n, dt, tag).map(|(m, _)| m)
}

/// The four Gamma blocks of a split-domain induction: `blocks[s][d]` maps
/// coefficients on destination piece `d` to nodal continuation values on
/// source piece `s`.
#[derive(Debug, Clone)]
pub struct SplitMomentBlocks {
    pub blocks: [[MomentMatrix; 2]; 2],
}

/// Split-domain Gamma blocks for a conditionally normal step with
/// per-node means supplied by `step_mean`.
pub fn normal_split_blocks(
    left: &Domain64,
    right: &Domain64,
    degrees: (usize, usize),
    step_mean: impl Fn(f64) -> f64,
    variance: f64,
    dt: f64,
    tag: &str,
) -> Result<SplitMomentBlocks, CoreError> {
    if left.upper() != right.lower() {
        return Err(CoreError::InvalidDomain(
            "split domains must share the split point".into(),
        ));
    }
    let src: [Vec<f64>; 2] = [cheb_nodes(degrees.0, left), cheb_nodes(degrees.1, right)];
    let dsts = [(left, degrees.0), (right, degrees.1)];
    let make = |s: usize, d: usize| -> Result<MomentMatrix, CoreError> {
        let means: Vec<f64> = src[s].iter().map(|&x| step_mean(x)).collect();
        normal_moment_block(dsts[d].0, &means, variance, dsts[d].1, dt, tag)
    };
    Ok(SplitMomentBlocks {
        blocks: [[make(0, 0)?, make(0, 1)?], [make(1, 0)?, make(1, 1)?]],
    })
}

/// Split-domain Gamma blocks from a characteristic function.
pub fn cf_split_blocks(
    cf: &dyn Fn(f64) -> Complex64,
    left: &Domain64,
    right: &Domain64,
    degrees: (usize, usize),
    dt: f64,
    cfg: &QuadratureConfig,
    tag: &str,
) -> Result<SplitMomentBlocks, CoreError> {
    if left.upper() != right.lower() {
        return Err(CoreError::InvalidDomain(
            "split domains must share the split point".into(),
        ));
    }
    let src: [Vec<f64>; 2] = [cheb_nodes(degrees.0, left), cheb_nodes(degrees.1, right)];
    let dsts = [(left, degrees.0), (right, degrees.1)];
    let make = |s: usize, d: usize| -> Result<MomentMatrix, CoreError> {
        cf_moment_block(cf, &src[s], dsts[d].0, dsts[d].1, dt, cfg, tag)
    };
    Ok(SplitMomentBlocks {
        blocks: [[make(0, 0)?, make(0, 1)?], [make(1, 0)?, make(1, 1)?]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn mu0_matches_normal_mass() {
        let m = truncated_normal_cheb_moments(0.0, 1.0, 1).unwrap();
        assert!((m.mu[0] - 0.682689492137086).abs() < 1e-12);
        // Symmetry: f(1) = f(-1) and mean 0 give mu_1 = 0.
        assert!(m.mu[1].abs() < 1e-15);
        // Base case of the derivative sequence.
        assert_eq!(m.mu_prime[1], m.mu[0]);
    }

    #[test]
    fn production_moments_match_oracle_at_spec_point() {
        let m = truncated_normal_cheb_moments(0.2, 0.5, 64).unwrap();
        let q = moments_by_quadrature(0.2, 0.5, 64, 1e-13);
        for (a, b) in m.mu.iter().zip(&q) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn recursion_branch_is_stable_in_its_region() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let mut exercised = 0;
        for _ in 0..60 {
            let n = rng.gen_range(4..=32usize);
            let mean = rng.gen_range(-1.0..1.0);
            let std = rng.gen_range(1e-3..1.25 / n as f64);
            if !recursion_is_stable(mean, std, n) {
                continue;
            }
            exercised += 1;
            let rec = moments_by_recursion(mean, std, n);
            let q = moments_by_quadrature(mean, std, n, 1e-13);
            let max_dev = rec
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_dev < 1e-10, "mean {mean}, std {std}, n {n}: {max_dev}");
        }
        assert!(exercised > 30, "guard rejected almost every draw");
    }

    #[test]
    fn fallback_covers_unstable_inputs() {
        // Mean far outside [-1, 1]: forward recursion would explode, the
        // production function must still agree with quadrature.
        for (mean, std) in [(2.5, 0.7), (-3.0, 1.4), (0.3, 1e-5), (0.0, 1.4)] {
            let m = truncated_normal_cheb_moments(mean, std, 96).unwrap();
            let q = moments_by_quadrature(mean, std, 96, 1e-13);
            let max_dev = m
                .mu
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_dev < 1e-10, "mean {mean}, std {std}: {max_dev}");
        }
    }

    #[test]
    fn moment_bounds_hold() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mean = rng.gen_range(-3.0..3.0);
            let std = rng.gen_range(0.01..1.5);
            let m = truncated_normal_cheb_moments(mean, std, 32).unwrap();
            assert!((0.0..=1.0 + 1e-12).contains(&m.mu[0]));
            for mu_j in &m.mu {
                assert!(mu_j.abs() <= m.mu[0] + 1e-12);
            }
        }
    }

    #[test]
    fn parameter_errors() {
        assert!(matches!(
            truncated_normal_cheb_moments(0.0, 0.0, 4),
            Err(CoreError::InvalidParameter(_))
        ));
        assert!(matches!(
            truncated_normal_cheb_moments(0.0, 1.0, 4096),
            Err(CoreError::SizeLimit(_))
        ));
        let d = Domain::new(-1.0, 1.0).unwrap();
        assert!(matches!(
            normal_moment_matrix(&d, 0.0, -1.0, 4, 0.1, "t"),
            Err(CoreError::InvalidParameter(_))
        ));
        assert!(matches!(
            mc_moment_matrix(|_| 0.0, &d, 2, 10, 1, 0.1, "t"),
            Err(CoreError::InvalidParameter(_))
        ));
    }

    #[test]
    fn normal_matrix_first_column_is_probability_mass() {
        let d = Domain::new(-0.5, 1.5).unwrap();
        let n = 8;
        let drift = 0.02;
        let var = 0.09;
        let m = normal_moment_matrix(&d, drift, var, n, 0.1, "bs").unwrap();
        for (k, &x) in cheb_nodes(n, &d).iter().enumerate() {
            let mass = norm_cdf(d.upper(), x + drift, var.sqrt())
                - norm_cdf(d.lower(), x + drift, var.sqrt());
            assert!((m.row(k)[0] - mass).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_variance_recovers_basis_values() {
        let d = Domain::new(-1.0, 1.0).unwrap();
        let n = 6;
        let m = normal_moment_matrix(&d, 0.0, 1e-10, n, 0.1, "bs").unwrap();
        let nodes = cheb_nodes(n, &d);
        for (k, &x) in nodes.iter().enumerate() {
            // Interior nodes only: at the boundary half the mass truncates.
            if k == 0 || k == n {
                continue;
            }
            let z = d.to_unit(x);
            for j in 0..=n {
                let t_j = (j as f64 * z.acos()).cos();
                assert!(
                    (m.row(k)[j] - t_j).abs() < 1e-6,
                    "row {k} col {j}: {} vs {t_j}",
                    m.row(k)[j]
                );
            }
        }
    }

    #[test]
    fn normal_matrix_matches_monte_carlo() {
        let d = Domain::new(-1.0, 1.0).unwrap();
        let n = 6;
        let drift = -0.05;
        let var: f64 = 0.16;
        let analytic = normal_moment_matrix(&d, drift, var, n, 0.1, "bs").unwrap();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let incs: Vec<f64> = (0..2_000_000)
            .map(|_| {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                drift + var.sqrt() * z
            })
            .collect();
        let nodes = cheb_nodes(n, &d);
        let (mc, se) = mc_moment_block_with_se(&incs, &nodes, &d, n, 0.1, "mc").unwrap();
        for k in 0..=n {
            for j in 0..=n {
                let dev = (analytic.row(k)[j] - mc.row(k)[j]).abs();
                let tol = 4.0 * se[k * (n + 1) + j] + 1e-12;
                assert!(dev <= tol, "({k},{j}): dev {dev:.2e} > 4 se {tol:.2e}");
            }
        }
    }

    use rand_distr::Distribution;

    #[test]
    fn mc_point_mass_recovers_basis() {
        let d = Domain::new(-1.0, 1.0).unwrap();
        let n = 5;
        let m = mc_moment_matrix(|_| 0.0, &d, n, 5000, 7, 0.1, "mc").unwrap();
        let nodes = cheb_nodes(n, &d);
        for (k, &x) in nodes.iter().enumerate() {
            let z = d.to_unit(x);
            for j in 0..=n {
                let t_j = (j as f64 * z.clamp(-1.0, 1.0).acos()).cos();
                assert!((m.row(k)[j] - t_j).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mc_is_deterministic_in_seed() {
        let d = Domain::new(-1.0, 1.0).unwrap();
        let sampler = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            z
        };
        let a = mc_moment_matrix(sampler, &d, 4, 2000, 3, 0.1, "mc").unwrap();
        let b = mc_moment_matrix(sampler, &d, 4, 2000, 3, 0.1, "mc").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cf_route_matches_analytic_for_gaussian() {
        let dt = 0.02;
        let (b, sig) = (0.01, 0.25);
        let cf = move |u: f64| {
            (Complex64::new(0.0, b * dt * u) - Complex64::new(0.5 * sig * sig * dt * u * u, 0.0))
                .exp()
        };
        let d = Domain::new(-1.0, 1.0).unwrap();
        let n = 12;
        let via_cf =
            cf_moment_matrix(&cf, &d, n, dt, &QuadratureConfig::default(), "gauss").unwrap();
        let analytic = normal_moment_matrix(&d, b * dt, sig * sig * dt, n, dt, "gauss").unwrap();
        for k in 0..=n {
            for j in 0..=n {
                assert!(
                    (via_cf.row(k)[j] - analytic.row(k)[j]).abs() < 1e-8,
                    "({k},{j}): {} vs {}",
                    via_cf.row(k)[j],
                    analytic.row(k)[j]
                );
            }
        }
    }

    #[test]
    fn cf_matrix_respects_probability_bounds() {
        let dt = 0.05;
        let cf = move |u: f64| {
            (Complex64::new(0.0, 0.02 * dt * u)
                - Complex64::new(0.5 * 0.04 * dt * u * u, 0.0))
            .exp()
        };
        let d = Domain::new(-0.6, 0.9).unwrap();
        let m = cf_moment_matrix(&cf, &d, 8, dt, &QuadratureConfig::default(), "g").unwrap();
        for k in 0..m.n_rows() {
            let row = m.row(k);
            assert!((-1e-9..=1.0 + 1e-9).contains(&row[0]));
            for v in row {
                assert!(v.abs() <= row[0] + 1e-9);
            }
        }
    }

    #[test]
    fn cf_diagnostics_reject_non_decaying_cf() {
        // |cf| = 1 everywhere: a pure point mass at a drift; the tail check
        // must flag it.
        let cf = |u: f64| Complex64::new(0.0, 0.3 * u).exp();
        let d = Domain::new(-1.0, 1.0).unwrap();
        let err = cf_moment_matrix(&cf, &d, 4, 0.1, &QuadratureConfig::default(), "bad");
        assert!(matches!(err, Err(CoreError::Numerical(_))));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let d = Domain::new(-0.731, 1.574).unwrap();
        let m = normal_moment_matrix(&d, 0.0123, 0.0456, 7, 0.02, "bs q").unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = MomentMatrix::read_csv(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn derivative_moments_match_quadrature() {
        // mu'_j = E[T_j'(Y) 1] checked against direct quadrature of
        // j U_{j-1}(y) f(y).
        let (mean, std) = (0.1, 0.4);
        let m = truncated_normal_cheb_moments(mean, std, 12).unwrap();
        for j in 1..=12usize {
            let quad = crate::math::composite_gl(
                |y| {
                    let theta = y.clamp(-1.0, 1.0).acos();
                    let u = if theta.sin().abs() < 1e-12 {
                        // U_{j-1}(+-1) limits
                        let s = if y > 0.0 { 1.0 } else { (-1.0f64).powi(j as i32 - 1) };
                        s * j as f64
                    } else {
                        (j as f64 * theta).sin() / theta.sin()
                    };
                    j as f64 * u * norm_pdf(y, mean, std)
                },
                -1.0,
                1.0,
                256,
                16,
            );
            assert!(
                (m.mu_prime[j] - quad).abs() < 1e-9,
                "j = {j}: {} vs {quad}",
                m.mu_prime[j]
            );
        }
    }
}
