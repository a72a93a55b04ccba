//! Mapping from errors to process exit codes.
//!
//! | code | meaning                                              |
//! |------|------------------------------------------------------|
//! | 0    | success                                              |
//! | 1    | internal error                                       |
//! | 2    | I/O error (missing file, unreadable directory, ...)  |
//! | 3    | malformed input or incompatible data                 |
//! | 4    | invalid configuration or command line                |

use std::fmt;

use zippy_core::error::{
    BinNormError, EvalError, GeometryError, GraphError, IoFormatError, MatchError, SearchError, TensorError,
    WeightsError,
};
use zippy_core::mpsearch::SearchFailure;

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

/// An error raised by the CLI itself with an explicit exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn format(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_FORMAT,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn weights_code(e: &WeightsError) -> i32 {
    match e {
        WeightsError::Io { .. } => EXIT_IO,
        _ => EXIT_FORMAT,
    }
}

fn io_format_code(e: &IoFormatError) -> i32 {
    match e {
        IoFormatError::Io { .. } => EXIT_IO,
        IoFormatError::Format { .. } => EXIT_FORMAT,
    }
}

fn graph_code(e: &GraphError) -> i32 {
    match e {
        GraphError::Config(_) | GraphError::BinNorm(_) => EXIT_CONFIG,
        GraphError::Weights(w) => weights_code(w),
        GraphError::InvalidInput(_) | GraphError::Tensor(_) => EXIT_FORMAT,
    }
}

fn search_code(e: &SearchError) -> i32 {
    match e {
        SearchError::Space { .. } | SearchError::Evaluation { .. } => EXIT_CONFIG,
    }
}

/// Exit code for the first recognized error in the chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<WeightsError>() {
            return weights_code(e);
        }
        if let Some(e) = cause.downcast_ref::<IoFormatError>() {
            return io_format_code(e);
        }
        if let Some(e) = cause.downcast_ref::<GraphError>() {
            return graph_code(e);
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::Io(io) => io_format_code(io),
                _ => EXIT_FORMAT,
            };
        }
        if let Some(e) = cause.downcast_ref::<SearchFailure>() {
            return search_code(&e.error);
        }
        if let Some(e) = cause.downcast_ref::<SearchError>() {
            return search_code(e);
        }
        if cause.is::<MatchError>() || cause.is::<TensorError>() {
            return EXIT_FORMAT;
        }
        if let Some(e) = cause.downcast_ref::<GeometryError>() {
            return match e {
                GeometryError::InvalidConfig(_) => EXIT_CONFIG,
                _ => EXIT_FORMAT,
            };
        }
        if cause.is::<BinNormError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_INTERNAL
}
