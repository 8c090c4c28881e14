use std::path::PathBuf;

use thiserror::Error;

use crate::fb::TrainTraces;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("discount {0} is outside (0, 1)")]
    Discount(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not row-stochastic: {0}")]
    NotStochastic(String),

    #[error("repeat factor must be at least 1")]
    ZeroRepeat,

    #[error("unknown MDP class `{0}` (expected general, doubly_stochastic or lazy)")]
    UnknownClass(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("matrix has non-finite entries")]
    NonFinite,

    #[error("SVD did not converge")]
    SvdConvergence,

    #[error("spectrum is identically zero")]
    ZeroSpectrum,

    #[error("value iteration did not converge in {iters} iterations (last residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("bound assumption violated: {0}")]
    Assumption(String),

    #[error("certificate inequality violated: {lhs:e} > {rhs:e}")]
    Certificate { lhs: f64, rhs: f64 },

    #[error("training diverged at step {step} (loss {loss:e})")]
    Diverged {
        step: usize,
        loss: f64,
        traces: Box<TrainTraces>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
