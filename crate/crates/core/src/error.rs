use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated a documented precondition (shapes, sizes, empty input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Incompatible configuration, detected when a model or command is built.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A point lies on or outside the bounded domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation produced a non-finite value.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    /// The adaptive solver ran out of its evaluation budget.
    #[error("ODE solver exceeded {max_evals} evaluations; last accepted time {last_t}")]
    SolverDivergence { last_t: f64, max_evals: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 1 for usage/configuration problems, 2 for runtime
    /// and numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) => 1,
            _ => 2,
        }
    }
}
