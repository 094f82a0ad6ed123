//! Small numerical utilities shared across modules: normal distribution
//! functions, composite Gauss-Legendre quadrature and compensated sums.

/// Standard normal density.
pub fn std_norm_pdf(x: f64) -> f64 {
    (-(0.5) * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF, evaluated through `erfc` for tail accuracy.
pub fn std_norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Normal density with the given mean and standard deviation.
pub fn norm_pdf(x: f64, mean: f64, std: f64) -> f64 {
    std_norm_pdf((x - mean) / std) / std
}

/// Normal CDF with the given mean and standard deviation.
pub fn norm_cdf(x: f64, mean: f64, std: f64) -> f64 {
    std_norm_cdf((x - mean) / std)
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`,
/// by Newton iteration on the Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre P_n(x) and derivative via the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Integrates `f` over `[lo, hi]` with `panels` equal panels of a
/// `pts`-point Gauss-Legendre rule.
pub fn composite_gl<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, panels: usize, pts: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(pts);
    let h = (hi - lo) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let a = lo + p as f64 * h;
        let c = a + 0.5 * h;
        let mut acc = 0.0;
        for (z, w) in nodes.iter().zip(&weights) {
            acc += w * f(c + 0.5 * h * z);
        }
        total += 0.5 * h * acc;
    }
    total
}

/// Neumaier-compensated sum; deterministic and independent of chunking
/// as long as the element order is fixed.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = compensated_sum(xs) / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_cdf_reference_points() {
        assert!((std_norm_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((std_norm_cdf(1.0) - 0.841344746068543).abs() < 1e-12);
        assert!((std_norm_cdf(-1.0) - 0.158655253931457).abs() < 1e-12);
        // Phi(1) - Phi(-1)
        assert!((std_norm_cdf(1.0) - std_norm_cdf(-1.0) - 0.682689492137086).abs() < 1e-12);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        // 8-point rule is exact up to degree 15.
        let (nodes, weights) = gauss_legendre(8);
        let integral: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(x, w)| w * (x.powi(14) + 3.0 * x.powi(7) + 2.0))
            .sum();
        let exact = 2.0 / 15.0 + 4.0;
        assert!((integral - exact).abs() < 1e-13);
    }

    #[test]
    fn composite_gl_handles_narrow_gaussian() {
        let s = 1e-4;
        let v = composite_gl(|x| norm_pdf(x, 0.3, s), 0.3 - 12.0 * s, 0.3 + 12.0 * s, 8, 24);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compensated_sum_beats_naive_on_cancellation() {
        let xs = vec![1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(&xs), 2.0);
    }
}
