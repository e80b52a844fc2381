use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum ShonanError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("internal inconsistency: {0}")]
    InternalInconsistency(String),

    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: data error: {message}")]
    Data { line: usize, message: String },

    #[error("saddle escape failed after {trials} line-search trials")]
    EscapeFailed { trials: usize },

    #[error("degenerate factor: sigma_d / sigma_1 = {ratio:e}")]
    DegenerateFactor { ratio: f64 },

    #[error("karcher mean did not converge in {iterations} iterations (residual {residual:e})")]
    KarcherNonConvergence { iterations: usize, residual: f64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

pub type Result<T, E = ShonanError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> ShonanError {
    ShonanError::InvalidArgument(msg.into())
}
