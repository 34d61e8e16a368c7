use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("bisection bracket [{lo}, {hi}] does not straddle the target {target} (values {f_lo}, {f_hi})")]
    BracketNotStraddled {
        lo: f64,
        hi: f64,
        target: f64,
        f_lo: f64,
        f_hi: f64,
    },

    #[error("degenerate privacy constraint: d delta/d sigma = {0}")]
    DegenerateConstraint(f64),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("noise stream exhausted after {0} steps")]
    StreamExhausted(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
