use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("non-finite value at step {step} (t = {time})")]
    NonFinite { step: usize, time: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("quadrature did not converge (estimated residual {residual:e}): {context}")]
    Quadrature { residual: f64, context: String },

    #[error("exponential fit failed: max residual {residual:e} above tolerance {tolerance:e}")]
    FitFailure { residual: f64, tolerance: f64 },

    #[error("degenerate Matsubara pole at m = {m}: mu_m equals gamma; perturb beta slightly")]
    DegeneratePole { m: usize },

    #[error("kernel is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    KernelInvalid { min_eigenvalue: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("work budget exceeded: {required} > {budget} ({what})")]
    Budget {
        what: String,
        required: u64,
        budget: u64,
    },

    #[error("dynamical map not invertible at t = {time}")]
    MapNotInvertible { time: f64 },

    #[error("positivity violation at t = {time}: {reason}")]
    PositivityViolation { time: f64, reason: String },

    #[error("secular approximation inapplicable: {0}")]
    SecularInapplicable(String),

    #[error("map is not linear in the initial state (mismatch {mismatch:e})")]
    Nonlinear { mismatch: f64 },

    #[error("recurrence coefficient beta_{n} lost positivity ({value:e})")]
    RecurrenceBreakdown { n: usize, value: f64 },

    #[error("too many invalid trajectories: {invalid} of {total}")]
    TooManyInvalid { invalid: usize, total: usize },
}
