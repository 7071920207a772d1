//! Command layer for hipandas: experiment configs, phantom generation,
//! run manifests, previews, and the subcommands behind the `hipandas` binary.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod phantom;
pub mod preview;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit code: 2 for bad input, 3 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<hipandas::Error> for CliError {
    fn from(e: hipandas::Error) -> Self {
        use hipandas::Error as E;
        match e {
            E::Numerical(_) | E::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            E::Io(io) => CliError::Io(io),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
