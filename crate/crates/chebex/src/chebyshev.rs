//! Chebyshev interpolation on arbitrary finite intervals.
//!
//! A function on the interval `[lower, upper]` is represented by the
//! coefficients `c_0..c_N` of its interpolant at the Chebyshev points
//! `z_k = cos(pi k / N)`, mapped to the interval by the affine transform
//! `tau(z) = upper + 0.5 (lower - upper)(1 - z)`:
//!
//! ```text
//! f(x) ~ sum_{j=0}^{N} c_j T_j(tau^{-1}(x)),
//! c_j = (2^{1(0<j<N)} / N) * sum''_{k=0}^{N} f(x_k) T_j(z_k),
//! ```
//!
//! where `sum''` halves the `k = 0` and `k = N` terms. Evaluation uses
//! Clenshaw's recurrence `b_k = c_k + 2 z b_{k+1} - b_{k+2}`.
//!
//! Everything here is scalar-generic over [`num_traits::Float`]; the crate
//! root exports `f64` aliases (`ChebApprox64`, ...) which the pricing
//! engine uses. All types are immutable after construction and all
//! operations are pure, so values can be shared freely across threads.

use num_traits::{Float, FloatConst};

use crate::error::CoreError;

/// A finite interpolation interval `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain<F> {
    lower: F,
    upper: F,
}

impl<F: Float> Domain<F> {
    /// Builds a domain, requiring `lower < upper` and both finite.
    pub fn new(lower: F, upper: F) -> Result<Self, CoreError> {
        if !lower.is_finite() || !upper.is_finite() {
            return Err(CoreError::InvalidDomain(
                "domain bounds must be finite".into(),
            ));
        }
        if lower >= upper {
            return Err(CoreError::InvalidDomain(
                "domain requires lower < upper".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> F {
        self.lower
    }

    pub fn upper(&self) -> F {
        self.upper
    }

    pub fn width(&self) -> F {
        self.upper - self.lower
    }

    pub fn contains(&self, x: F) -> bool {
        x >= self.lower && x <= self.upper
    }

    /// Maps `x` in `[lower, upper]` to `z` in `[-1, 1]` (inverse of `tau`).
    pub fn to_unit(&self, x: F) -> F {
        let two = F::one() + F::one();
        F::one() - two * (self.upper - x) / self.width()
    }

    /// Maps `z` in `[-1, 1]` to `x` in `[lower, upper]` (the transform `tau`).
    pub fn from_unit(&self, z: F) -> F {
        let half = F::from(0.5).unwrap();
        self.upper + half * (self.lower - self.upper) * (F::one() - z)
    }

    /// Clamps `x` to the domain.
    pub fn clamp(&self, x: F) -> F {
        x.max(self.lower).min(self.upper)
    }
}

/// Chebyshev points of degree `n` mapped to `domain`, in the native
/// descending order `x_0 = upper, ..., x_n = lower`.
pub fn cheb_nodes<F: Float + FloatConst>(n: usize, domain: &Domain<F>) -> Vec<F> {
    assert!(n >= 1, "cheb_nodes requires degree >= 1");
    let nf = F::from(n).unwrap();
    (0..=n)
        .map(|k| {
            if k == 0 {
                domain.upper()
            } else if k == n {
                domain.lower()
            } else {
                let z = (F::PI() * F::from(k).unwrap() / nf).cos();
                domain.from_unit(z)
            }
        })
        .collect()
}

/// A Chebyshev interpolant: domain plus coefficients `c_0..c_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebApprox<F> {
    domain: Domain<F>,
    coeffs: Vec<F>,
}

impl<F: Float + FloatConst> ChebApprox<F> {
    /// Builds an interpolant from raw coefficients.
    pub fn from_coeffs(domain: Domain<F>, coeffs: Vec<F>) -> Result<Self, CoreError> {
        if coeffs.is_empty() {
            return Err(CoreError::InvalidData(
                "coefficient vector must be non-empty".into(),
            ));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(CoreError::InvalidData(
                "coefficients must be finite".into(),
            ));
        }
        Ok(Self { domain, coeffs })
    }

    /// Interpolates nodal values given at `cheb_nodes(N, domain)` (same
    /// descending order), producing the coefficients `c_0..c_N`.
    pub fn fit(nodal_values: &[F], domain: Domain<F>) -> Result<Self, CoreError> {
        let n = nodal_values.len().checked_sub(1).ok_or_else(|| {
            CoreError::InvalidData("fit requires at least two nodal values".into())
        })?;
        if n < 1 {
            return Err(CoreError::InvalidData(
                "fit requires at least two nodal values".into(),
            ));
        }
        if nodal_values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidData(
                "nodal values must be finite".into(),
            ));
        }

        // cos(pi m / N) table; T_j(z_k) = cos(pi (j k mod 2N) / N).
        let nf = F::from(n).unwrap();
        let table: Vec<F> = (0..2 * n)
            .map(|m| (F::PI() * F::from(m).unwrap() / nf).cos())
            .collect();

        let two = F::one() + F::one();
        let half = F::from(0.5).unwrap();
        let mut coeffs = Vec::with_capacity(n + 1);
        for j in 0..=n {
            let mut acc = F::zero();
            for (k, &v) in nodal_values.iter().enumerate() {
                let t = table[(j * k) % (2 * n)];
                let w = if k == 0 || k == n { half } else { F::one() };
                acc = acc + w * v * t;
            }
            let factor = if j == 0 || j == n { F::one() / nf } else { two / nf };
            coeffs.push(factor * acc);
        }
        Self::from_coeffs(domain, coeffs)
    }

    pub fn domain(&self) -> &Domain<F> {
        &self.domain
    }

    pub fn coeffs(&self) -> &[F] {
        &self.coeffs
    }

    /// Polynomial degree `N`.
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Evaluates the interpolant at `x` by Clenshaw's recurrence.
    ///
    /// No domain clamping is performed: for `x` outside the domain this is
    /// the polynomial continuation at `tau^{-1}(x)`; extrapolation policy
    /// belongs to the caller.
    pub fn evaluate(&self, x: F) -> F {
        clenshaw(&self.coeffs, self.domain.to_unit(x))
    }

    /// Elementwise [`Self::evaluate`] into a caller-provided buffer.
    pub fn evaluate_into(&self, xs: &[F], out: &mut [F]) {
        assert_eq!(xs.len(), out.len());
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = self.evaluate(x);
        }
    }

    /// Coefficient-space derivative, including the chain-rule factor
    /// `2 / (upper - lower)` of the interval transform.
    ///
    /// Uses the backward recurrence `c'_{k-1} = c'_{k+1} + 2 k c_k` with the
    /// final `c'_0` halving. A constant input yields the zero polynomial.
    pub fn differentiate(&self) -> Self {
        let n = self.degree();
        if n == 0 {
            return Self {
                domain: self.domain,
                coeffs: vec![F::zero()],
            };
        }
        let two = F::one() + F::one();
        let scale = two / self.domain.width();
        let mut deriv = vec![F::zero(); n];
        // c'_{n} = 0 (virtual), c'_{n-1} = 2 n c_n, then downwards.
        let mut next = F::zero(); // c'_{k+1}
        let mut after = F::zero(); // c'_{k+2}
        for k in (1..=n).rev() {
            let cur = after + two * F::from(k).unwrap() * self.coeffs[k];
            after = next;
            next = cur;
            deriv[k - 1] = cur;
        }
        deriv[0] = deriv[0] * F::from(0.5).unwrap();
        for d in deriv.iter_mut() {
            *d = *d * scale;
        }
        Self {
            domain: self.domain,
            coeffs: deriv,
        }
    }

    /// Magnitudes `|c_j|`, the a-posteriori convergence diagnostic.
    pub fn coefficient_decay(&self) -> Vec<F> {
        self.coeffs.iter().map(|c| c.abs()).collect()
    }
}

/// Clenshaw evaluation of `sum_j c_j T_j(z)`.
pub fn clenshaw<F: Float>(coeffs: &[F], z: F) -> F {
    let n = coeffs.len() - 1;
    if n == 0 {
        return coeffs[0];
    }
    let two = F::one() + F::one();
    let mut b1 = F::zero();
    let mut b2 = F::zero();
    for k in (1..=n).rev() {
        let b = coeffs[k] + two * z * b1 - b2;
        b2 = b1;
        b1 = b;
    }
    coeffs[0] + z * b1 - b2
}

/// Two Chebyshev interpolants joined at a split point; `x <= split_point`
/// routes to the left piece, mirroring the `[lower, s]` / `(s, upper]`
/// indicator convention.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitApprox<F> {
    left: ChebApprox<F>,
    right: ChebApprox<F>,
}

impl<F: Float + FloatConst> SplitApprox<F> {
    pub fn new(left: ChebApprox<F>, right: ChebApprox<F>) -> Result<Self, CoreError> {
        if left.domain().upper() != right.domain().lower() {
            return Err(CoreError::InvalidDomain(
                "split pieces must share the split point".into(),
            ));
        }
        Ok(Self { left, right })
    }

    pub fn split_point(&self) -> F {
        self.left.domain().upper()
    }

    pub fn left(&self) -> &ChebApprox<F> {
        &self.left
    }

    pub fn right(&self) -> &ChebApprox<F> {
        &self.right
    }

    /// Full domain `[left.lower, right.upper]`.
    pub fn domain(&self) -> Domain<F> {
        Domain {
            lower: self.left.domain().lower(),
            upper: self.right.domain().upper(),
        }
    }

    pub fn evaluate(&self, x: F) -> F {
        if x <= self.split_point() {
            self.left.evaluate(x)
        } else {
            self.right.evaluate(x)
        }
    }
}

/// Either a single interpolant or a split pair; the engine's per-time-step
/// value-function representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Approximant<F> {
    Single(ChebApprox<F>),
    Split(SplitApprox<F>),
}

impl<F: Float + FloatConst> Approximant<F> {
    pub fn domain(&self) -> Domain<F> {
        match self {
            Approximant::Single(a) => *a.domain(),
            Approximant::Split(s) => s.domain(),
        }
    }

    pub fn evaluate(&self, x: F) -> F {
        match self {
            Approximant::Single(a) => a.evaluate(x),
            Approximant::Split(s) => s.evaluate(x),
        }
    }

    /// Piecewise coefficient-space derivative.
    pub fn differentiate(&self) -> Self {
        match self {
            Approximant::Single(a) => Approximant::Single(a.differentiate()),
            Approximant::Split(s) => Approximant::Split(SplitApprox {
                left: s.left.differentiate(),
                right: s.right.differentiate(),
            }),
        }
    }
}

/// Elementwise evaluation of an approximant over a batch of points.
///
/// Results are bitwise identical to calling [`Approximant::evaluate`] per
/// element, independent of any chunking a caller applies.
pub fn evaluate_batch<F: Float + FloatConst>(approx: &Approximant<F>, xs: &[F]) -> Vec<F> {
    xs.iter().map(|&x| approx.evaluate(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Domain<f64> {
        Domain::new(-1.0, 1.0).unwrap()
    }

    // Independent oracle: direct summation via cos(j acos z).
    fn direct_sum(coeffs: &[f64], z: f64) -> f64 {
        let theta = z.clamp(-1.0, 1.0).acos();
        coeffs
            .iter()
            .enumerate()
            .map(|(j, c)| c * (j as f64 * theta).cos())
            .sum()
    }

    #[test]
    fn nodes_descend_and_hit_cosine_values() {
        let nodes = cheb_nodes(2, &unit());
        assert_eq!(nodes[0], 1.0);
        assert_eq!(nodes[2], -1.0);
        assert!(nodes[1].abs() < 1e-15);

        let shifted = cheb_nodes(2, &Domain::new(0.0, 2.0).unwrap());
        for (a, b) in shifted.iter().zip([2.0, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }

        let n4 = cheb_nodes(4, &unit());
        let half_sqrt2 = 0.5f64.sqrt();
        let expect = [1.0, half_sqrt2, 0.0, -half_sqrt2, -1.0];
        for (a, b) in n4.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn nodes_are_antisymmetric_on_symmetric_domain() {
        let d = Domain::new(-3.0, 3.0).unwrap();
        let nodes = cheb_nodes(17, &d);
        for k in 0..=17 {
            assert!((nodes[k] + nodes[17 - k]).abs() < 1e-13);
        }
    }

    #[test]
    fn invalid_domain_is_rejected() {
        assert!(Domain::new(1.0, 1.0).is_err());
        assert!(Domain::new(2.0, 1.0).is_err());
        assert!(Domain::new(f64::NAN, 1.0).is_err());
        assert!(Domain::new(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn fit_recovers_basis_polynomials() {
        // f = 1 -> c_0 = 1.
        let d = Domain::new(-2.0, 5.0).unwrap();
        let ones = vec![1.0; 9];
        let a = ChebApprox::fit(&ones, d).unwrap();
        assert!((a.coeffs()[0] - 1.0).abs() < 1e-14);
        for c in &a.coeffs()[1..] {
            assert!(c.abs() < 1e-14);
        }

        // f(x) = x on [-1,1] -> c_1 = 1.
        let nodes = cheb_nodes(3, &unit());
        let a = ChebApprox::fit(&nodes, unit()).unwrap();
        for (j, c) in a.coeffs().iter().enumerate() {
            let expect = if j == 1 { 1.0 } else { 0.0 };
            assert!((c - expect).abs() < 1e-14, "c_{j} = {c}");
        }

        // f(x) = 2x^2 - 1 = T_2 -> c_2 = 1.
        let nodes = cheb_nodes(4, &unit());
        let values: Vec<f64> = nodes.iter().map(|x| 2.0 * x * x - 1.0).collect();
        let a = ChebApprox::fit(&values, unit()).unwrap();
        for (j, c) in a.coeffs().iter().enumerate() {
            let expect = if j == 2 { 1.0 } else { 0.0 };
            assert!((c - expect).abs() < 1e-14, "c_{j} = {c}");
        }
    }

    #[test]
    fn fit_rejects_non_finite_values() {
        let bad = vec![1.0, f64::NAN, 0.0];
        assert!(matches!(
            ChebApprox::fit(&bad, unit()),
            Err(CoreError::InvalidData(_))
        ));
    }

    #[test]
    fn evaluate_is_identity_for_t1() {
        let a = ChebApprox::from_coeffs(unit(), vec![0.0, 1.0]).unwrap();
        assert!((a.evaluate(0.3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn interpolation_round_trip_at_nodes() {
        let d = Domain::new(0.1, 2.7).unwrap();
        let nodes = cheb_nodes(24, &d);
        let values: Vec<f64> = nodes.iter().map(|x| (3.0 * x).sin() / x).collect();
        let a = ChebApprox::fit(&values, d).unwrap();
        for (x, v) in nodes.iter().zip(&values) {
            let rel = (a.evaluate(*x) - v).abs() / v.abs().max(1.0);
            assert!(rel < 1e-12);
        }
    }

    #[test]
    fn clenshaw_matches_direct_summation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let coeffs: Vec<f64> = (0..=n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let z: f64 = rng.gen_range(-1.0..1.0);
            let lhs = clenshaw(&coeffs, z);
            let rhs = direct_sum(&coeffs, z);
            assert!(
                (lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0),
                "clenshaw {lhs} vs direct {rhs}"
            );
        }
    }

    #[test]
    fn polynomial_exactness_off_grid() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let d = Domain::new(-1.5, 2.5).unwrap();
        // Arbitrary degree-6 polynomial, fitted with N = 9 >= 6.
        let poly =
            |x: f64| 0.3 - 1.2 * x + 0.7 * x.powi(2) + 0.05 * x.powi(4) - 0.01 * x.powi(6);
        let nodes = cheb_nodes(9, &d);
        let values: Vec<f64> = nodes.iter().map(|&x| poly(x)).collect();
        let a = ChebApprox::fit(&values, d).unwrap();
        for _ in 0..1000 {
            let x = rng.gen_range(-1.5..2.5);
            let rel = (a.evaluate(x) - poly(x)).abs() / poly(x).abs().max(1.0);
            assert!(rel < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn differentiate_identity_and_t2() {
        // d/dx x = 1.
        let a = ChebApprox::from_coeffs(unit(), vec![0.0, 1.0]).unwrap();
        let da = a.differentiate();
        assert_eq!(da.coeffs(), &[1.0]);

        // T_2' = 4 T_1.
        let t2 = ChebApprox::from_coeffs(unit(), vec![0.0, 0.0, 1.0]).unwrap();
        let dt2 = t2.differentiate();
        assert_eq!(dt2.coeffs(), &[0.0, 4.0]);

        // Constant differentiates to the zero polynomial.
        let c = ChebApprox::from_coeffs(unit(), vec![5.0]).unwrap();
        assert_eq!(c.differentiate().coeffs(), &[0.0]);
    }

    #[test]
    fn differentiate_matches_finite_differences() {
        let d = Domain::new(-0.8, 1.9).unwrap();
        let nodes = cheb_nodes(20, &d);
        let values: Vec<f64> = nodes.iter().map(|&x| (x * x - 0.3 * x).exp()).collect();
        let a = ChebApprox::fit(&values, d).unwrap();
        let da = a.differentiate();
        let h = 1e-5;
        for i in 0..200 {
            let x = -0.75 + 2.6 * (i as f64 + 0.5) / 200.0;
            let fd = (a.evaluate(x + h) - a.evaluate(x - h)) / (2.0 * h);
            let an = da.evaluate(x);
            assert!(
                (an - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                "x = {x}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn differentiate_of_degree_d_polynomial_is_exact() {
        let d = Domain::new(-2.0, 1.0).unwrap();
        let poly = |x: f64| 1.0 - 2.0 * x + 3.0 * x.powi(3);
        let dpoly = |x: f64| -2.0 + 9.0 * x * x;
        let nodes = cheb_nodes(8, &d);
        let values: Vec<f64> = nodes.iter().map(|&x| poly(x)).collect();
        let da = ChebApprox::fit(&values, d).unwrap().differentiate();
        for i in 0..50 {
            let x = -2.0 + 3.0 * i as f64 / 49.0;
            assert!((da.evaluate(x) - dpoly(x)).abs() < 1e-11);
        }
    }

    #[test]
    fn coefficient_decay_flags_smooth_vs_kinked() {
        let a = ChebApprox::from_coeffs(unit(), vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(a.coefficient_decay(), vec![1.0, 0.0, 0.0]);

        // exp(x): last coefficient tiny at N = 16.
        let nodes = cheb_nodes(16, &unit());
        let values: Vec<f64> = nodes.iter().map(|x| x.exp()).collect();
        let smooth = ChebApprox::fit(&values, unit()).unwrap();
        assert!(*smooth.coefficient_decay().last().unwrap() < 1e-12);

        // |x|: slow decay at N = 64 flags the kink.
        let nodes = cheb_nodes(64, &unit());
        let values: Vec<f64> = nodes.iter().map(|x| x.abs()).collect();
        let kinked = ChebApprox::fit(&values, unit()).unwrap();
        assert!(*kinked.coefficient_decay().last().unwrap() > 1e-6);
    }

    #[test]
    fn split_approx_agrees_with_unsplit_polynomial() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let poly = |x: f64| 0.5 + x - 0.25 * x * x + 0.125 * x.powi(3);

        let full = Domain::new(-1.0, 3.0).unwrap();
        let nodes = cheb_nodes(12, &full);
        let values: Vec<f64> = nodes.iter().map(|&x| poly(x)).collect();
        let unsplit = ChebApprox::fit(&values, full).unwrap();

        let fit_on = |d: Domain<f64>| {
            let nodes = cheb_nodes(8, &d);
            let values: Vec<f64> = nodes.iter().map(|&x| poly(x)).collect();
            ChebApprox::fit(&values, d).unwrap()
        };
        let split = SplitApprox::new(
            fit_on(Domain::new(-1.0, 0.7).unwrap()),
            fit_on(Domain::new(0.7, 3.0).unwrap()),
        )
        .unwrap();

        let xs: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..3.0)).collect();
        let a = evaluate_batch(&Approximant::Split(split), &xs);
        let b = evaluate_batch(&Approximant::Single(unsplit), &xs);
        for (l, r) in a.iter().zip(&b) {
            assert!((l - r).abs() < 1e-10);
        }
    }

    #[test]
    fn split_routes_boundary_to_left() {
        let left = ChebApprox::from_coeffs(Domain::new(0.0, 1.0).unwrap(), vec![10.0]).unwrap();
        let right = ChebApprox::from_coeffs(Domain::new(1.0, 2.0).unwrap(), vec![20.0]).unwrap();
        let s = SplitApprox::new(left, right).unwrap();
        assert_eq!(s.evaluate(1.0), 10.0);
        assert_eq!(s.evaluate(1.0 + 1e-12), 20.0);

        let mismatched = SplitApprox::new(
            ChebApprox::from_coeffs(Domain::new(0.0, 1.0).unwrap(), vec![0.0]).unwrap(),
            ChebApprox::from_coeffs(Domain::new(1.5, 2.0).unwrap(), vec![0.0]).unwrap(),
        );
        assert!(mismatched.is_err());
    }

    #[test]
    fn empty_batch_yields_empty_output() {
        let a = Approximant::Single(ChebApprox::from_coeffs(unit(), vec![1.0, 2.0]).unwrap());
        assert!(evaluate_batch(&a, &[]).is_empty());
        // Single-element batch equals evaluate.
        assert_eq!(evaluate_batch(&a, &[0.4])[0], a.evaluate(0.4));
    }

    #[test]
    fn works_in_f32_too() {
        let d = Domain::<f32>::new(-1.0, 1.0).unwrap();
        let nodes = cheb_nodes(6, &d);
        let values: Vec<f32> = nodes.iter().map(|&x| x * x).collect();
        let a = ChebApprox::fit(&values, d).unwrap();
        assert!((a.evaluate(0.5) - 0.25).abs() < 1e-5);
    }
}
