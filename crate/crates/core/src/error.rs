use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MuseError>;

#[derive(Debug, Error)]
pub enum MuseError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },

    #[error("generation failed for ROI {roi_id}: {msg}")]
    Generation { roi_id: String, msg: String },

    #[error("crop infeasible: mpp_o={mpp_o} r_o={r_o} needs source side {side} > ROI side {roi_side}")]
    CropInfeasible {
        mpp_o: f64,
        r_o: usize,
        side: usize,
        roi_side: usize,
    },

    #[error("training diverged at step {step}: {term} is {value}")]
    Training {
        step: usize,
        term: String,
        value: f64,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl MuseError {
    pub fn arg(msg: impl Into<String>) -> Self {
        MuseError::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        MuseError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MuseError::Io {
            path: path.into(),
            source,
        }
    }
}
