//! Simulation and analysis toolkit for one-dimensional SDEs
//!
//! ```text
//! dX_t = b(X_t) dt + sigma |X_t|^alpha dW_t,   alpha in [1/2, 1),  b(0) > 0
//! ```
//!
//! discretized with the symmetrized Euler scheme
//!
//! ```text
//! X_{k+1} = | X_k + b(X_k) dt + sigma X_k^alpha (W_{t_{k+1}} - W_{t_k}) |
//! ```
//!
//! The crate is split by role:
//!
//! - [`model`]: drift registry, model parameters and hypothesis checks.
//! - [`schemes`]: steppers, path simulation, the exact CIR transition sampler and
//!   the dyadic Brownian ladder used for common random numbers.
//! - [`analytics`]: closed forms and quadratures (CIR Laplace transform, inverse
//!   moments, probability bounds, explicit constants, hitting law, local time).
//! - [`montecarlo`]: deterministic parallel estimators, weak-error ladders and
//!   rate fitting.
//! - [`pdeoracle`]: finite-difference solver for the Kolmogorov backward equation.
//! - [`rng`]: the counter-based generator all estimators draw from.

// `!(x <= limit)` is the NaN-rejecting form used throughout; Kronrod nodes are
// kept at their published precision.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod analytics;
pub mod error;
pub mod model;
pub mod montecarlo;
pub mod pdeoracle;
pub mod quadrature;
pub mod rng;
pub mod schemes;

pub use error::{Error, Result};
pub use model::{DriftSpec, HypothesisReport, ModelSpec};
pub use schemes::{GridSpec, PathRecord};
