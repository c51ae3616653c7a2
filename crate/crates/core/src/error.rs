use std::io;
use std::path::PathBuf;

use crate::autograd::TensorError;
use crate::datagen::ManifestError;
use crate::image::PgmError;
use crate::persistence::CheckpointError;
use crate::routing::RoutingError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("sequence length error: step {step} exceeds maximum {max}")]
    SequenceLength { step: usize, max: usize },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: PgmError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at iteration {iteration}: non-finite loss on samples {samples:?}")]
    Diverged { iteration: u64, samples: Vec<usize> },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
