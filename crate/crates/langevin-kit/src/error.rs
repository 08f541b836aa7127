use thiserror::Error;

/// Errors raised by the schemes, analytics and probes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {component}")]
    Overflow { component: String },

    #[error("chain diverged at step {step} ({component})")]
    Diverged { step: u64, component: String },

    #[error("aggregated noise covariance is degenerate (k = {k}, gamma = {gamma}, det = {det:e})")]
    Degenerate { k: usize, gamma: f64, det: f64 },

    #[error("not enough usable data: {0}")]
    InsufficientSignal(String),

    #[error("internal consistency check failed: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParameter(msg()))
    }
}

pub(crate) fn ensure_positive(name: &str, value: f64) -> Result<()> {
    ensure(value.is_finite() && value > 0.0, || {
        format!("{name} must be positive and finite, got {value}")
    })
}

pub(crate) fn ensure_dim(name: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{name} has length {got}, expected {want}")))
    }
}
