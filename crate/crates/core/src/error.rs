use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite {what} at node {node} (t = {t})")]
    NonFinite { what: &'static str, node: usize, t: f64 },

    #[error("no density at t = 0 for an initial law with atoms")]
    NoDensityAtZero,

    #[error("reversal drift is singular at t = T for an initial law with atoms")]
    Singular,

    #[error("|xi| = {norm} lies outside the admissible window (xi_max = {xi_max})")]
    OutOfWindow { norm: f64, xi_max: f64 },

    #[error("amplification exponent {exponent} exceeds cap {cap}")]
    AmplificationCap { exponent: f64, cap: f64 },

    #[error("density below floor at query point (vacuum)")]
    Vacuum,

    #[error("degenerate cloud: zero variance in coordinate {0}")]
    DegenerateCloud(usize),

    #[error("non-finite position for particle {particle} at step {step}")]
    Diverged { particle: usize, step: usize },

    #[error("ensemble too sparse: {vacuums} of {n} particles in vacuum at step {step}")]
    TooSparse { step: usize, vacuums: usize, n: usize },

    #[error("no reference law for snapshot at t = {0}")]
    ReferenceMismatch(f64),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
