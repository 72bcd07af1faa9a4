use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the adaptation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed an argument outside the operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Two operands disagree on shape.
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    /// An iterative routine failed to converge or produced non-finite values.
    #[error("numerical failure in {what} (residual {residual:e})")]
    Numerical { what: String, residual: f64 },

    /// A precondition on object state was violated (wrong layer mode, stochastic routing, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input file parsed but its content is inconsistent.
    #[error("format error: {0}")]
    Format(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    /// Configuration is invalid or references something absent.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    /// A metric is undefined for the given input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numerical(what: impl Into<String>, residual: f64) -> Self {
        Error::Numerical {
            what: what.into(),
            residual,
        }
    }

    /// Process exit code: 1 for numerical failures, 2 for configuration and validation errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
