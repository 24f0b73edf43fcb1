use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NdaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NdaError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("gradient check failed at parameter {param}, coordinate {coord}: {detail}")]
    GradientCheck {
        param: usize,
        coord: usize,
        detail: String,
    },

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (components: {components})")]
    Diverged {
        epoch: usize,
        batch: usize,
        components: String,
    },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl NdaError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        NdaError::Contract(msg.into())
    }

    pub(crate) fn parse(line: usize, detail: impl Into<String>) -> Self {
        NdaError::Parse {
            line,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NdaError::Io {
            path: path.into(),
            source,
        }
    }
}
