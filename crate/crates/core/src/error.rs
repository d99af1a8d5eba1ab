use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Graph or dataset input that violates a structural precondition.
    #[error("structural input error: {0}")]
    Structural(String),

    /// Input for which the requested quantity is undefined.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("forward cache does not match the parameters or inputs passed to backward")]
    StaleCache,

    #[error("non-finite piecewise objective (first offending piece centered at node {piece})")]
    NonFinite { piece: usize },

    #[error("enumeration of {configurations} configurations exceeds the oracle limit of {limit}")]
    OracleLimit { configurations: f64, limit: u64 },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
