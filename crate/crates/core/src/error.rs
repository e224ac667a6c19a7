use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite integrand value {value} at node {node}")]
    Evaluation { node: String, value: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("closed form not applicable: {0}")]
    ClosedFormInapplicable(String),

    #[error("no fixed point bracketed in [{lo}, {hi}] (rhs = {rhs_lo:e} and {rhs_hi:e})")]
    NoFixedPoint { lo: f64, hi: f64, rhs_lo: f64, rhs_hi: f64 },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("degenerate purifier: |a1(g2)| = {0:e}")]
    DegeneratePurifier(f64),

    #[error("information exponent of `{label}` exceeds scan range 1..={max_k}")]
    ExponentOutOfRange { label: String, max_k: usize },

    #[error("divergence at t = {time}: state {state:?}")]
    Divergence { time: f64, state: Vec<f64> },

    #[error("sample size {got} below required minimum {min}")]
    SampleSize { got: usize, min: usize },

    #[error("numerical consistency error: {0}")]
    NumericalConsistency(String),
}

impl Error {
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}
