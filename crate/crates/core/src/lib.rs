//! Projection of infinite-dimensional forward-rate dynamics onto a
//! finite-dimensional curve manifold, plus calibration of the underlying
//! volatility parameters from the projected coordinate time series.
//!
//! The pipeline, bottom to top:
//!
//! * [`function_space`] — a discretized weighted Hilbert space of curves on
//!   `[0, T0]`: grids, quadrature, inner products and the curve calculus
//!   (`d/dx`, antiderivative) that the no-arbitrage drift needs.
//! * [`manifold`] — parametrized curve families `G(z, ·)`, their tangent
//!   bases, Gram matrices and the weighted orthogonal projection onto the
//!   tangent space.
//! * [`hjm`] — volatility specifications, the no-arbitrage drift, the
//!   Stratonovich correction via directional derivatives, and a grid-level
//!   Euler simulator used as an oracle.
//! * [`projection_dynamics`] — the coordinate SDE obtained by projecting the
//!   curve flow: drift/diffusion coefficients, the Itô conversion term and
//!   two cross-validating integrators.
//! * [`estimation`] — GMM calibration of volatility parameters from sampled
//!   coordinate paths: moment functions, Newey–West long-run covariance and
//!   iterated optimal weighting.
//!
//! All numeric kernels are generic over the scalar type via [`scalar::Scalar`]
//! (`f32` or `f64`); the aliases below fix the `f64` working precision used by
//! the CLI and most tests.

// Index loops over small matrices and multi-array quadrature sums read better
// than the zip chains clippy suggests.
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod estimation;
pub mod function_space;
pub mod hjm;
pub mod io;
pub mod linalg;
pub mod manifold;
pub mod noise;
pub mod optim;
pub mod projection_dynamics;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` working-precision aliases.
pub type Grid64 = function_space::Grid<f64>;
pub type Curve64 = function_space::Curve<f64>;
pub type Weight64 = function_space::WeightFunction<f64>;
pub type Family64 = manifold::ManifoldFamily<f64>;
pub type Gram64 = manifold::GramMatrix<f64>;
pub type VolSpec64 = hjm::VolatilitySpec<f64>;
pub type HjmPath64 = hjm::HjmPath<f64>;
pub type CoordSde64 = projection_dynamics::CoordSde<f64>;
pub type CoordSeries64 = projection_dynamics::CoordSeries<f64>;
pub type ThetaSpace64 = estimation::ThetaSpace<f64>;
pub type GmmProblem64 = estimation::GmmProblem<f64>;
