use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A config document problem, naming the offending key when there is one.
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {reason} (at byte {position})")]
    Checkpoint { position: usize, reason: String },
    #[error("image: {0}")]
    Image(String),
    #[error("eval: {0}")]
    Eval(String),
    #[error(transparent)]
    Core(#[from] diffusion_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
