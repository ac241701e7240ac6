use thiserror::Error;

/// Errors raised by the analytic and simulation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BrwError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parameters are not subcritical (mu - beta = {margin}); a steady state requires mu > beta")]
    NotSubcritical { margin: f64 },

    #[error("kernel and grid disagree: {0}")]
    GridMismatch(String),

    #[error("offset {offset:?} lies outside the torus range")]
    OffsetOutOfRange { offset: Vec<i64> },

    #[error("no snapshot recorded at t = {0}")]
    MissingSnapshot(f64),

    #[error("step control failed after {halvings} halvings (last drift {drift:e}); try h <= {suggested_step:e}")]
    StepControl {
        halvings: u32,
        drift: f64,
        suggested_step: f64,
    },

    #[error("population cap {cap} exceeded at t = {time} in replica {replica}")]
    Explosion { replica: usize, time: f64, cap: u64 },

    #[error("moment order {0} is not supported (orders 1 to 3 only)")]
    UnsupportedOrder(usize),
}

impl BrwError {
    /// True for failures of a numerical procedure, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, BrwError::StepControl { .. } | BrwError::Explosion { .. })
    }
}

pub type Result<T> = std::result::Result<T, BrwError>;
