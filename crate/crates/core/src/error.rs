use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("batchnorm: degenerate batch with {0} samples per channel (need at least 2)")]
    DegenerateBatch(usize),
    #[error("max_over_neighbors: empty neighborhood (k = 0)")]
    EmptyNeighborhood,
    #[error("loss has no supervised pixels")]
    NoSupervision,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("point {index} lies behind the camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },
    #[error("scatter collision at pixel (u={u}, v={v})")]
    Collision { u: usize, v: usize },
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("checkpoint mismatch: {0}")]
    Version(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
