//! Crate-wide error type.

use std::path::{Path, PathBuf};

pub type Result<T> = std::result::Result<T, RaError>;

/// Unified error for every fallible operation in the crate.
///
/// The variants partition failures by who has to act on them: `Config` and
/// `Shape` mean the caller passed something inconsistent, `State` means a
/// required artifact (checkpoint, feature extractor) is missing or stale,
/// `Data` and `Io` are dataset/filesystem problems, and `NonFinite` signals
/// numeric divergence during training.
#[derive(Debug, thiserror::Error)]
pub enum RaError {
    /// Invalid configuration value or architecture mismatch.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor or image shapes inconsistent with what an operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// Operation needs an artifact that is missing or not loaded.
    #[error("state error: {0}")]
    State(String),

    /// Dataset or manifest content problem.
    #[error("data error: {0}")]
    Data(String),

    /// A loss term or activation became NaN or infinite.
    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    /// I/O failure with the path that caused it.
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RaError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        RaError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 for configuration problems,
    /// 3 for data/environment problems, 4 for numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            RaError::Config(_) | RaError::Shape(_) => 2,
            RaError::State(_) | RaError::Data(_) | RaError::Io { .. } => 3,
            RaError::NonFinite { .. } => 4,
        }
    }
}
