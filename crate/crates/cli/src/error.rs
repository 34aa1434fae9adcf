//! CLI error type with process exit codes: 1 for configuration or I/O
//! problems, 2 for malformed data files.

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error in {file}: {message}")]
    Schema { file: String, message: String },

    #[error(transparent)]
    Core(#[from] scm_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema { .. } => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> CliError {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(file: impl AsRef<Path>, message: impl Into<String>) -> CliError {
        CliError::Schema {
            file: file.as_ref().display().to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
