//! Error taxonomy shared by every module in the crate.
//!
//! The variants map onto the process exit codes used by the CLI: configuration
//! and input problems ([`Error::Config`], [`Error::Format`], [`Error::CsvLine`],
//! shape/contract/degenerate errors) are user-fixable (exit 2), while
//! [`Error::Numeric`] signals a runtime numerical failure such as a NaN
//! gradient (exit 3).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors had incompatible shapes for the attempted operation.
    #[error("{op}: shape mismatch, left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A caller violated an operation precondition (batch sizes, index
    /// ranges, parameter domains, ...).
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Input that is structurally valid but unusable (empty feature set,
    /// all-identical points where a spread is required, ...).
    #[error("{op}: degenerate input: {msg}")]
    Degenerate { op: &'static str, msg: String },

    /// Binary file format violation; `offset` is the byte position at which
    /// parsing failed.
    #[error("{path}: invalid data at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    /// CSV violation; `line` is 1-based.
    #[error("{path}: line {line}: {msg}")]
    CsvLine {
        path: String,
        line: usize,
        msg: String,
    },

    /// Bad run configuration (unknown key, invalid method, out-of-range
    /// hyperparameter).
    #[error("config: {0}")]
    Config(String),

    /// Non-finite value where the algorithm requires finite arithmetic
    /// (NaN/Inf gradient, overflowing loss).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn degenerate(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Degenerate {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
