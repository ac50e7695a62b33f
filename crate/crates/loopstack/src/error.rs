//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A non-finite value escaped a loop block. Raised by the block layer
    /// without run context; the engine wraps it into [`Error::Fault`].
    #[error("non-finite value from {block} ({signal})")]
    NonFinite {
        block: &'static str,
        signal: &'static str,
    },

    /// Fatal simulation fault, with the tick and node it occurred at.
    #[error("simulation fault at tick {tick}, node {node}: {detail}")]
    Fault {
        tick: u64,
        node: String,
        detail: String,
    },

    /// Bad configuration: unknown parameter, undeclared topic or channel,
    /// invalid block constants, wrong units.
    #[error("configuration error: {0}")]
    Config(String),

    /// Model file failed to load or validate.
    #[error("model error at {path}: {detail}")]
    Model { path: String, detail: String },

    /// API misuse (empty trace, out-of-range window).
    #[error("usage error: {0}")]
    Usage(String),

    /// The model failed lint and the run was not told to proceed anyway.
    #[error("lint failed with {0} finding(s); rerun with --allow-lint-failures to proceed")]
    Lint(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn model(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Model {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Attach run context to a block-level non-finite error.
    pub fn into_fault(self, tick: u64, node: &str) -> Self {
        match self {
            Error::NonFinite { block, signal } => Error::Fault {
                tick,
                node: node.to_string(),
                detail: format!("non-finite value from {block} ({signal})"),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
