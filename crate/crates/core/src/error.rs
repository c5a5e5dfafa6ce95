use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by tensor kernels and the autodiff tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: division by zero")]
    DivisionByZero { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: input outside the operator domain ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("axis {axis} out of range for a {ndim}-d tensor")]
    InvalidAxis { axis: usize, ndim: usize },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward already ran on this tape")]
    TapeConsumed,
    #[error("variable belongs to a different tape")]
    ForeignVariable,
    #[error("{op}: {detail}")]
    Geometry { op: &'static str, detail: String },
}

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot decode image {path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("architecture descriptor mismatch: {0}")]
    Descriptor(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("{path}, line {line}: {detail}")]
    PairsParse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
