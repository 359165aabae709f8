use std::fmt;

use oqsim::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const COMPARE_FAILED: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const POSITIVITY: i32 = 4;
    pub const BUDGET: i32 = 5;
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Solver { context: String, source: Error },
    CompareFailed(String),
}

impl CliError {
    pub fn solver(context: impl Into<String>) -> impl FnOnce(Error) -> CliError {
        let context = context.into();
        move |source| CliError::Solver { context, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => exit::CONFIG,
            CliError::CompareFailed(_) => exit::COMPARE_FAILED,
            CliError::Solver { source, .. } => match source {
                Error::Budget { .. } => exit::BUDGET,
                Error::PositivityViolation { .. } => exit::POSITIVITY,
                Error::Domain(_)
                | Error::Dimension(_)
                | Error::Unsupported(_)
                | Error::InvalidState(_)
                | Error::SecularInapplicable(_) => exit::CONFIG,
                _ => exit::NUMERICAL,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Solver { context, source } => write!(f, "{context}: {source}"),
            CliError::CompareFailed(m) => write!(f, "comparison failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
