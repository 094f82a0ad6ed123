//! Chebyshev-interpolation engine for option pricing and counterparty
//! credit exposure.
//!
//! The crate prices European, Bermudan and barrier equity options and
//! Bermudan interest-rate swaptions by backward induction over Chebyshev
//! interpolants of the value function, then evaluates the resulting
//! closed-form approximations along simulated risk-factor paths to build
//! expected-exposure (EE) and potential-future-exposure (PFE) profiles
//! under both the pricing measure Q and the real-world measure P.
//!
//! Module map:
//! - [`chebyshev`]: nodes, interpolation coefficients, Clenshaw evaluation,
//!   coefficient-space differentiation, split-domain approximants.
//! - [`moments`]: conditional expectations of the Chebyshev basis one time
//!   step ahead (the Gamma matrix), computed analytically for conditionally
//!   normal transitions, by characteristic-function quadrature, or by
//!   Monte Carlo.
//! - [`models`]: Black-Scholes, Merton jump-diffusion and Hull-White
//!   dynamics with exact-transition path simulation under P and Q.
//! - [`products`]: payoffs, dynamic-programming combine rules and schedules.
//! - [`engine`]: backward induction, pathwise exposure evaluation, PFE
//!   quantiles, CVA aggregation, Delta/Gamma profiles.
//! - [`lsm`]: least-squares Monte Carlo baseline.
//! - [`oracles`]: analytic Black-Scholes, COS-method reference pricers and
//!   full re-evaluation comparators.

pub mod chebyshev;
pub mod engine;
pub mod error;
pub mod lsm;
pub mod math;
pub mod models;
pub mod moments;
pub mod oracles;
pub mod products;

pub use error::CoreError;

/// Concrete `f64` aliases for the scalar-generic interpolation types.
pub type Domain64 = chebyshev::Domain<f64>;
pub type ChebApprox64 = chebyshev::ChebApprox<f64>;
pub type SplitApprox64 = chebyshev::SplitApprox<f64>;
pub type Approximant64 = chebyshev::Approximant<f64>;

/// Crate version embedded into run summaries.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
