use std::path::PathBuf;

use muse_core::MuseError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error at {path}: {msg}")]
    Io { path: PathBuf, msg: String },

    #[error("{0}")]
    Threshold(String),

    #[error("run failed: {0}")]
    Run(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.into(),
            msg: e.to_string(),
        }
    }

    /// 1 threshold or training failure, 2 configuration, 3 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Threshold(_) | CliError::Run(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}

impl From<MuseError> for CliError {
    fn from(e: MuseError) -> Self {
        match e {
            MuseError::Io { ref path, .. } | MuseError::Decode { ref path, .. } => CliError::Io {
                path: path.clone(),
                msg: e.to_string(),
            },
            MuseError::Config(_) | MuseError::Argument(_) | MuseError::Generation { .. } | MuseError::CropInfeasible { .. } => {
                CliError::Config(e.to_string())
            }
            MuseError::Training { .. } | MuseError::NonFinite(_) => CliError::Run(e.to_string()),
        }
    }
}
