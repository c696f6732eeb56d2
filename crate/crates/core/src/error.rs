use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GamaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GamaError {
    /// Invalid argument, shape mismatch or out-of-range configuration value.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input data that violates a domain invariant (non-finite coordinates, bad labels).
    #[error("data error: {0}")]
    Data(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    /// A neighborhood whose spread cannot support the requested tangent dimension.
    #[error("degenerate neighborhood at node {node}: {reason}")]
    DegenerateNeighborhood { node: usize, reason: String },

    /// A loss term or gradient evaluated to NaN or infinity.
    #[error("numeric error in {term}: {detail}")]
    Numeric { term: String, detail: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("schema error: missing column `{column}`")]
    Schema { column: String },

    #[error("parse error at row {row}: {detail}")]
    Parse { row: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GamaError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        GamaError::Parameter(msg.into())
    }

    pub(crate) fn numeric(term: impl Into<String>, detail: impl Into<String>) -> Self {
        GamaError::Numeric {
            term: term.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GamaError::Io {
            path: path.into(),
            source,
        }
    }
}
