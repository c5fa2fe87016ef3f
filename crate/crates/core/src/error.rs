use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid architecture, schedule or training configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shapes that do not fit together.
    #[error("shape error: {0}")]
    Shape(String),

    /// Caller-supplied value out of its domain (batch size, epoch, label, image size).
    #[error("input error: {0}")]
    Input(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Checkpoint parameters that are absent, unexpected, or of the wrong shape.
    #[error("checkpoint does not match the model: {}", .offenders.join("; "))]
    CheckpointMismatch { offenders: Vec<String> },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
