use thiserror::Error;

/// Errors produced by the band selection and unmixing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Bandwidth root finding could not bracket or resolve the target.
    /// `lo`/`hi` are the last bracket on the inverse bandwidth `1/sigma^2`.
    #[error(
        "bandwidth search failed for target {target}: best bracket 1/sigma^2 in [{lo:e}, {hi:e}], residual {residual:e}"
    )]
    Convergence {
        target: f64,
        lo: f64,
        hi: f64,
        residual: f64,
    },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("degenerate solution: {0}")]
    Degenerate(String),

    #[error("clique search exceeded its node budget of {0}")]
    BudgetExceeded(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of a numerical routine (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Convergence { .. }
                | Error::Solver(_)
                | Error::Degenerate(_)
                | Error::BudgetExceeded(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
