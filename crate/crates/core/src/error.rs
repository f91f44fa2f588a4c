use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    /// `C_H` is singular at `H = 1/2`; the Brownian branch uses `K_H == 1`.
    #[error("kernel constant is undefined at H = 1/2; use the Brownian branch (K_H == 1)")]
    ClassicalKernel,

    #[error("covariance matrix of order {order} is not positive definite after jitter {jitter:e}")]
    NotPositiveDefinite { order: usize, jitter: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{flagged} of {total} paths produced non-finite values (budget {budget})")]
    FlaggedPaths {
        flagged: usize,
        total: usize,
        budget: usize,
    },

    #[error("regression failed at node {node}: {message}")]
    Regression { node: usize, message: String },

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
