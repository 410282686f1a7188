use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    Usage = 2,
    Data = 3,
    Numeric = 4,
}

#[derive(Debug, Error)]
pub enum AppError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config {}: {message}", path.display())]
    Config { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Core(#[from] srddpm_core::Error),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_status(&self) -> ExitStatus {
        use srddpm_core::Error as E;
        match self {
            AppError::Usage(_) | AppError::Config { .. } => ExitStatus::Usage,
            AppError::Checkpoint(_) | AppError::Io { .. } | AppError::Image { .. } => ExitStatus::Data,
            AppError::Core(e) => match e {
                E::Data(_) | E::Io { .. } | E::Parse { .. } | E::InsufficientSamples(_) => ExitStatus::Data,
                E::NonFinite(_) | E::EigenNoConvergence => ExitStatus::Numeric,
                E::Domain(_)
                | E::StepOutOfRange { .. }
                | E::ShapeMismatch { .. }
                | E::Config(_)
                | E::Task(_)
                | E::Predictor(_) => ExitStatus::Usage,
            },
        }
    }
}

pub type AppResult<T> = std::result::Result<T, AppError>;
