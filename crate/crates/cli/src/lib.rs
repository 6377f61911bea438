//! Batch driver: configuration, full-order and reduced runs, comparisons and
//! the limit-load width optimisation.

pub mod brent;
pub mod commands;
pub mod config;
pub mod optimize;

use hyperred_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    /// The run stopped early; its files were written and flagged.
    #[error("partial run: {0}")]
    Partial(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_RANK: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Partial(_) => EXIT_SOLVER,
            CliError::Core(e) => match e {
                Error::Rank { .. } | Error::Truncation { .. } => EXIT_RANK,
                Error::Solver(_) | Error::Singular(_) | Error::Element { .. } | Error::Material(_) | Error::NonFinite { .. } | Error::InvertedElement { .. } => EXIT_SOLVER,
                _ => EXIT_USAGE,
            },
        }
    }
}
