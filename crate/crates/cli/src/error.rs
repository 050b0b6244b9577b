use std::path::Path;

use thiserror::Error;

/// CLI failure, mapped onto the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("degenerate constraints: {0}")]
    Degenerate(String),
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Degenerate(_) => 2,
            CliError::NonConvergence(_) => 3,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn at(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Input(format!("{}: {err}", path.display()))
    }
}

impl From<depthcal::Error> for CliError {
    fn from(e: depthcal::Error) -> Self {
        match e {
            depthcal::Error::DegenerateConstraints(m) => CliError::Degenerate(m),
            other => CliError::Input(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
