use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used to pick a process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// The caller asked for something malformed (bad config, bad arguments).
    Usage,
    /// Input data is missing, corrupt, or violates a precondition.
    Data,
    /// A numeric computation diverged or left its domain.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("signal is empty or all-zero: {0}")]
    EmptySignal(String),

    #[error("signal too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("unsupported channel count {0}: only mono audio is accepted")]
    ChannelCount(u16),

    #[error("WAV format error in {chunk}: {detail}")]
    WavFormat { chunk: &'static str, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("model bundle parse error: {0}")]
    BundleParse(String),

    #[error("unsupported model bundle version {found} (expected {expected})")]
    BundleVersion { found: u32, expected: u32 },

    #[error("architecture fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input data: {0}")]
    InvalidData(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Domain(_) | Error::NonFinite(_) | Error::Diverged { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}
