//! Crate-wide error type.
//!
//! Variants map onto the CLI exit codes: configuration and argument problems
//! are usage errors (1), data/shape/IO problems are data errors (2), and
//! non-finite numerics or failed statistics are numerical failures (3).

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is invalid. The message names the offending field.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A function argument violates its contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Input data violates an invariant (bad label value, degenerate contrast, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Array shapes do not line up.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    /// A computation produced non-finite values or diverged.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A statistical procedure cannot run on the given samples.
    #[error("statistics error: {0}")]
    Stats(String),

    /// Report/figure emission failed.
    #[error("report error: {0}")]
    Report(String),

    /// An IO failure, with the path it happened on.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape { expected: expected.to_string(), actual: actual.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
