use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GmlpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GmlpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("architecture parse error at token {position} (`{token}`): {message}")]
    ArchParse {
        position: usize,
        token: String,
        message: String,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GmlpError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GmlpError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input (bad config, arguments or file
    /// contents) rather than by a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            GmlpError::Config(_)
                | GmlpError::ArchParse { .. }
                | GmlpError::Parse { .. }
                | GmlpError::Label { .. }
        )
    }
}
