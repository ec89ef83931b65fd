//! Errors grouped by the exit code they produce.
//!
//! 2 is left to clap for usage errors.

use std::path::PathBuf;

use meshdeform::Error;

pub const IO: u8 = 3;
pub const CONFIG: u8 = 4;
pub const NUMERIC: u8 = 5;
pub const OTHER: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}: no such file or directory")]
    Missing(PathBuf),

    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),

    #[error("{0}")]
    Check(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Missing(_) | CliError::Io(..) => IO,
            CliError::Check(_) => NUMERIC,
            CliError::Core(e) => match e {
                Error::Io { .. } => IO,
                Error::Parse { .. } | Error::Image { .. } | Error::InvalidConfig(_) | Error::Empty(_) => CONFIG,
                Error::NonFinite { .. }
                | Error::NonFiniteLoss { .. }
                | Error::Degenerate { .. }
                | Error::NonDeterministic { .. }
                | Error::SearchFailed(..) => NUMERIC,
                Error::Contract(_) => OTHER,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
