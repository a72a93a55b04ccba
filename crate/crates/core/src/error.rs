use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by tensor construction and the compute kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BinNormError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Errors reading, writing or binding a weight container.
#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"ZPWT\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported weight format version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch in record {index} ({name:?}): stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        index: usize,
        name: String,
        stored: u32,
        computed: u32,
    },
    #[error("shape mismatch for {name}: expected {expected}, found {found}")]
    ShapeMismatch {
        name: String,
        expected: String,
        found: String,
    },
    #[error("truncated weight data: {0}")]
    Truncated(String),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("malformed record: {0}")]
    Malformed(String),
}

/// Errors building or running the network graph.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    BinNorm(#[from] BinNormError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("descriptor dimension mismatch: {left} vs {right} bits")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid descriptor set: {0}")]
    InvalidSet(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate homography (|det| = {0:e})")]
    Degenerate(f64),
    #[error("homography estimation failed: {0}")]
    Estimation(String),
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
}

/// Errors reading images, datasets and exchange files.
#[derive(Debug, Error)]
pub enum IoFormatError {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl IoFormatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IoFormatError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        IoFormatError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Errors from sequence evaluation.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Io(#[from] IoFormatError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("detector failed: {0}")]
    Detector(String),
    #[error("invalid evaluation input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search space (line {line}): {message}")]
    Space { line: usize, message: String },
    #[error("evaluation of {label} failed: {message}")]
    Evaluation { label: String, message: String },
}
