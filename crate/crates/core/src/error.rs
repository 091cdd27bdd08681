use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum HerdError {
    #[error("kernel evaluation is not finite at r = {r}")]
    Domain { r: f64 },

    #[error("invalid kernel: {0}")]
    KernelInvalid(String),

    #[error(
        "no circumvention orbit: |kappa_c| = {kappa_c} must be below nu*sqrt(gamma_m) = {limit}"
    )]
    NoOrbit { kappa_c: f64, limit: f64 },

    #[error("driver {driver} and evader {evader} coincide (distance {distance:e}) at t = {t}")]
    Singularity {
        driver: usize,
        evader: usize,
        distance: f64,
        t: f64,
    },

    #[error("state diverged; last valid time t = {last_valid_t}")]
    Divergence { last_valid_t: f64 },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("diagnostic requires equal friction for all agents")]
    UnequalFriction,

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("header mismatch: {0}")]
    HeaderMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HerdError>;
