use std::fmt;

use gcp_smd::Error;

/// Failure classes, one per process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(Error),
    Numerical(Error),
    /// Verification or run-level failure without a single underlying error.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) | CliError::Failed(_) => 3,
        }
    }

    /// For errors raised while loading or writing files.
    pub fn data(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Data(other),
        }
    }

    /// For errors raised by the solver or the verification suites.
    pub fn numerical(e: Error) -> Self {
        match e.root() {
            Error::Config(_) | Error::Contract(_) => CliError::Usage(e.to_string()),
            Error::Io { .. } | Error::Parse { .. } | Error::Serialization(_) => CliError::Data(e),
            _ => CliError::Numerical(e),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Data(e) => write!(f, "data error: {e}"),
            CliError::Numerical(e) => write!(f, "numerical failure: {e}"),
            CliError::Failed(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
