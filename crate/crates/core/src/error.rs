use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("malformed audio file: {0}")]
    Format(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("input too short: {samples} samples, need at least {minimum}")]
    TooShort { samples: usize, minimum: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("infeasible alignment: {frames} frames cannot emit a target needing {required}")]
    InfeasibleAlignment { frames: usize, required: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint version error: {0}")]
    Version(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable class name, printed by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Unsupported(_) => "unsupported",
            Error::Io { .. } => "io",
            Error::Argument(_) => "argument",
            Error::Degenerate(_) => "degenerate",
            Error::TooShort { .. } => "too_short",
            Error::Dimension(_) => "dimension",
            Error::Contract(_) => "contract",
            Error::InfeasibleAlignment { .. } => "infeasible_alignment",
            Error::Data(_) => "data",
            Error::Version(_) => "version",
            Error::Divergence { .. } => "divergence",
            Error::Serde(_) => "serde",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
