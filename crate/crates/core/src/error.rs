use std::path::PathBuf;

/// Errors raised anywhere in the lab.
///
/// Each variant maps onto one of the process exit codes used by the CLI:
/// usage and configuration problems exit with 1, bad data with 2 and
/// numerical failures with 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value handed to an operation violates its precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// Inconsistent or unknown configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed dataset or checkpoint content.
    #[error("data error in {path}: {message}")]
    Data { path: String, message: String },

    /// Malformed line in a JSONL file (1-based line number).
    #[error("{path}:{line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },

    /// A quantity is mathematically undefined for the given inputs
    /// (e.g. a rank correlation with zero variance).
    #[error("undefined: {0}")]
    Undefined(String),

    /// Argument outside the domain of a function (e.g. log-odds of p >= 1).
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite loss or gradient during optimization.
    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },

    /// Exhaustive enumeration would exceed the configured budget.
    #[error("refused: {0}")]
    Refused(String),

    /// Gradient check found entries above the tolerance.
    #[error("gradient check failed: {0}")]
    GradCheck(String),

    /// Re-running a manifest produced different artifacts.
    #[error("reproduction mismatch: {0}")]
    Mismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Refused(_) => 1,
            Error::Input(_)
            | Error::Data { .. }
            | Error::Line { .. }
            | Error::Io { .. }
            | Error::Json(_) => 2,
            Error::Undefined(_)
            | Error::Domain(_)
            | Error::Numerical { .. }
            | Error::GradCheck(_)
            | Error::Mismatch(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
