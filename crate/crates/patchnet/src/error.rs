use std::io;
use std::path::PathBuf;

use crate::checkpoint::CheckpointError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    #[error(transparent)]
    Core(#[from] patchnet_core::Error),
    #[error("{}: {source}", path.display())]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("missing masks for {} image(s): {}", .0.len(), .0.join(", "))]
    MissingMasks(Vec<String>),
    /// A check the command performs did not pass.
    #[error("{0}")]
    Failed(String),
    /// Bad flag or config value; exits with the usage code.
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
