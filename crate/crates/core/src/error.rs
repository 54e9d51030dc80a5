use std::path::PathBuf;

/// Errors produced by the link simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed binary file. `offset` is the byte offset where parsing failed.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("invalid codebook: {0}")]
    Codebook(String),

    #[error("degenerate codebook: all pairwise distances are zero")]
    DegenerateCodebook,

    #[error("token {token} out of range for K={k}")]
    TokenOutOfRange { token: usize, k: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },

    #[error("no frame detected (peak correlation {peak:.3} below threshold {threshold:.3})")]
    NoFrameDetected { peak: f64, threshold: f64 },

    #[error("unusable pilot at subcarrier {0}")]
    UnusablePilot(usize),

    #[error("TVIR shorter than signal: need {needed} samples, record covers {available}")]
    TvirTooShort { needed: usize, available: usize },

    #[error("tape already consumed")]
    TapeConsumed,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
