//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown model family `{0}`")]
    UnknownFamily(String),

    #[error("missing parameter `{0}` for family `{1}`")]
    MissingParameter(&'static str, String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid too small for a stencil: axis {axis} has {nodes} nodes (need at least 3)")]
    GridTooSmall { axis: usize, nodes: usize },

    #[error("non-finite value in {context} (path {path}, step {step})")]
    NonFinitePath {
        context: &'static str,
        path: usize,
        step: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("PSOR failed to converge at time level {level} (residual {residual:.3e} after {iters} iterations)")]
    PsorNonConvergence {
        level: usize,
        residual: f64,
        iters: usize,
    },

    #[error("dimension mismatch: {0}")]
    Mismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
