//! Command errors and their exit codes.

use std::path::{Path, PathBuf};

use stgaze_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config line {line}, key `{key}`: {message}")]
    Config { line: usize, key: String, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn config(line: usize, key: &str, message: impl Into<String>) -> Self {
        CliError::Config {
            line,
            key: key.to_string(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 config, 3 I/O, 4 numeric, 5 checkpoint mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::GradCheck(_) => 4,
            CliError::Core(e) => match e {
                Error::InvalidArgument(_) | Error::Validation(_) => 2,
                Error::Io { .. } | Error::Format { .. } => 3,
                Error::NumericFailure(_) | Error::NoIntersection(_) => 4,
                Error::CheckpointMismatch { .. } => 5,
            },
        }
    }
}
