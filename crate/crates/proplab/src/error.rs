use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error(
        "no convergence after {iterations} iterations in each of {restarts} restarts (relative change {residual:.3e})"
    )]
    Convergence {
        restarts: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("no minimum: {0}")]
    NoMinimum(String),

    #[error(transparent)]
    Core(#[from] smallify_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
