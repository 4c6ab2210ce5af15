use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite potential")]
    NonFinitePotential,

    #[error("sinkhorn iteration did not converge after {iters} iterations (last delta {last_delta:e})")]
    NotConverged { iters: usize, last_delta: f64 },

    #[error("potential not converged (residual {residual:e} > tol {tol:e})")]
    PotentialNotConverged { residual: f64, tol: f64 },

    #[error("stale potential: first-order residual {residual:e} exceeds {limit:e}")]
    StalePotential { residual: f64, limit: f64 },

    #[error("potential jacobian did not converge after {iters} sweeps (residual {residual:e})")]
    JacobianNotConverged { iters: usize, residual: f64 },

    #[error("indefinite solve; increase damping (<x, g> = {inner:e})")]
    IndefiniteSolve { inner: f64 },

    #[error("non-finite function value at probe point {point:?}")]
    NonFiniteProbe { point: Vec<f64> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("empty run record")]
    EmptyRecord,

    #[error("run aborted: {0}")]
    RunAborted(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize, context: &'static str) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            actual,
            context,
        })
    }
}
