use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("rank mismatch: expected {expected}, found {found}")]
    RankMismatch { expected: String, found: String },
    #[error("grid mismatch between fields")]
    GridMismatch,
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("weight must be strictly positive (flat index {0})")]
    NonPositiveWeight(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("wall trace {trace:.3e} exceeds tolerance {tol:.3e}")]
    WallTrace { trace: f64, tol: f64 },
    #[error("identity residual {residual:.3e} exceeds gate {gate:.3e}")]
    ResidualGate { residual: f64, gate: f64 },
    #[error("linear solver did not converge: relative residual {0:.3e}")]
    NoConvergence(f64),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
