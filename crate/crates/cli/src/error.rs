use std::io;
use std::path::PathBuf;

use flam_core::Error;
use thiserror::Error as ThisError;

pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_EQUIVALENCE: i32 = 3;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{}: {source}", path.display())]
    Input { path: PathBuf, source: Error },

    #[error(transparent)]
    Core(#[from] Error),

    /// FLAM disagreed with centralized evaluation.
    #[error("FLAM/centralized equivalence violated: {0}")]
    Equivalence(String),

    #[error("round aborted: {0}")]
    Aborted(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Equivalence(_) => EXIT_EQUIVALENCE,
            CliError::Io { .. } | CliError::Input { .. } | CliError::Aborted(_) => EXIT_IO,
            CliError::Core(e) => match e {
                Error::InvalidConfig(_)
                | Error::InvalidSpec(_)
                | Error::InvalidKernel(_)
                | Error::TaskMismatch { .. }
                | Error::Infeasible(_) => EXIT_USAGE,
                _ => EXIT_IO,
            },
        }
    }

    /// Attaches the file a core error came from.
    pub fn input(path: impl Into<PathBuf>) -> impl FnOnce(Error) -> CliError {
        let path = path.into();
        move |source| match source {
            Error::Io(source) => CliError::Io { path, source },
            source => CliError::Input { path, source },
        }
    }
}
