use thiserror::Error;

/// Errors raised by field construction, solvers and drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("solver did not converge at outer node {node}: relative residual {residual:.3e} after {iterations} iterations")]
    Solver {
        node: usize,
        residual: f64,
        iterations: usize,
    },
    #[error("internal consistency error: {0}")]
    Consistency(String),
    #[error("resource budget exceeded: {0}")]
    Resource(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code used by the command line driver (3 for resource/validation errors).
    pub fn exit_code(&self) -> i32 {
        3
    }
}

pub type Result<T> = std::result::Result<T, Error>;
