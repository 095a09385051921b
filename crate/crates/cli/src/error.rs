use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] introprior_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("metrics error: {0}")]
    Metrics(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> CliResult<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> CliResult<T> {
        self.map_err(|source| CliError::Io {
            path: path.into(),
            source,
        })
    }
}
