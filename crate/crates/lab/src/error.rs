use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error(transparent)]
    Core(#[from] tvlab_core::Error),
}

impl LabError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for file problems, 4 for violated contracts.
    pub fn exit_code(&self) -> i32 {
        use tvlab_core::Error as E;
        match self {
            Self::Config { .. } => 2,
            Self::Io { .. } | Self::Format { .. } => 3,
            Self::Core(E::Config(_) | E::UnknownTask(_)) => 2,
            Self::Core(_) => 4,
        }
    }
}
