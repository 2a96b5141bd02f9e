use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PilotError>;

#[derive(Debug, Error)]
pub enum PilotError {
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("degenerate fusion anchor (norm {norm:e} <= 1e-8)")]
    DegenerateAnchor { norm: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("finite-difference oracle failed at coordinate {coord}: f = {value}")]
    OracleFailure { coord: usize, value: f64 },

    #[error("numerical blowup: non-finite loss at {location}")]
    NumericalBlowup { location: String },

    #[error("pseudo-label sets overlap: 2 * {k} > {batch}")]
    Overlap { k: usize, batch: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("all prompt weights are zero over the image set")]
    UndefinedContribution,

    #[error("kernel bandwidth is zero (all points identical)")]
    DegenerateKernel,

    #[error("unsupported checkpoint: {0}")]
    UnsupportedCheckpoint(String),

    #[error("malformed file {file}: {reason}")]
    Format { file: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PilotError {
    pub fn config(msg: impl Into<String>) -> Self {
        PilotError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PilotError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(file: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        PilotError::Format {
            file: file.into(),
            reason: reason.into(),
        }
    }

    /// True for errors that stem from bad inputs or configuration rather
    /// than numerical failure during a run.
    pub fn is_config_like(&self) -> bool {
        matches!(
            self,
            PilotError::Config(_)
                | PilotError::Io { .. }
                | PilotError::Format { .. }
                | PilotError::UnsupportedCheckpoint(_)
                | PilotError::Overlap { .. }
        )
    }
}
