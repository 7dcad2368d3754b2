use std::path::PathBuf;

use sieve_core::SieveError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_STAGE_ORDER: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_LOCKED: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] SieveError),

    #[error(
        "run directory {dir} is locked by another sieve process (delete {lock} if it is stale)"
    )]
    Locked { dir: PathBuf, lock: PathBuf },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(SieveError::StageOrder(_)) => EXIT_STAGE_ORDER,
            CliError::Core(SieveError::Io { .. }) | CliError::Io { .. } => EXIT_IO,
            CliError::Core(SieveError::Json { source, .. }) if source.is_io() => EXIT_IO,
            CliError::Core(_) | CliError::Config(_) => EXIT_VALIDATION,
            CliError::Locked { .. } => EXIT_LOCKED,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
