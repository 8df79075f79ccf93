use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: String,
    },

    #[error("unknown drift `{0}` (registered: affine, affine_plus_cos)")]
    UnknownDrift(String),

    #[error("unknown payoff `{0}` (registered: exp_neg, cosine, capped_poly)")]
    UnknownPayoff(String),

    #[error("unknown scheme `{0}` (registered: symmetrized, projection, exact_cir)")]
    UnknownScheme(String),

    #[error("ladder level {level} out of range (finest level is {max})")]
    LevelOutOfRange { level: usize, max: usize },

    #[error("state overflow on path {path} at step {step}: |x| = {value:e} exceeds 1e12")]
    StateOverflow { path: u64, step: usize, value: f64 },

    #[error(
        "inverse moment of order {order} does not exist: the theta-integral requires \
         order < 2a/sigma^2 = {limit}"
    )]
    NotIntegrable { order: f64, limit: f64 },

    #[error("reference `{0}` is not available for this model/payoff")]
    ReferenceUnavailable(String),

    #[error("rate fit needs at least {required} levels above the noise floor, got {usable}")]
    TooFewLevels { usable: usize, required: usize },

    #[error("quadrature did not reach tolerance: {0}")]
    Quadrature(String),

    #[error("tridiagonal solve failed at row {row} (pivot {pivot:e}) on grid nx={nx}, nt={nt}")]
    Tridiagonal {
        row: usize,
        pivot: f64,
        nx: usize,
        nt: usize,
    },

    #[error(
        "truncation x_max = {x_max} too small: boundary-weighted payoff variation {leak:e} \
         exceeds {limit:e}"
    )]
    TruncationTooSmall { x_max: f64, leak: f64, limit: f64 },

    #[error("PDE reference did not converge: last delta {delta:e} > tolerance {tolerance:e}")]
    NoConvergence { delta: f64, tolerance: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, value: f64, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        value,
        reason: reason.into(),
    }
}

/// Fails unless `value` is finite and strictly positive.
pub(crate) fn ensure_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(invalid(name, value, "must be finite and > 0"))
    }
}

pub(crate) fn ensure_nonnegative(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(invalid(name, value, "must be finite and >= 0"))
    }
}
