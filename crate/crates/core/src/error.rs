use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported {property}: {found} (expected {expected})")]
    UnsupportedAudio {
        property: &'static str,
        found: String,
        expected: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("fewer points than clusters ({points} < {clusters})")]
    TooFewPoints { points: usize, clusters: usize },

    #[error("empty stream: no frames to cluster")]
    EmptyStream,

    #[error("label {label} out of range for codebook of size {size}")]
    LabelOutOfRange { label: usize, size: usize },

    #[error("length mismatch for utterance {utterance}: {left} vs {right}")]
    LengthMismatch {
        utterance: String,
        left: usize,
        right: usize,
    },

    #[error("no frames")]
    NoFrames,

    #[error("degenerate phone distribution")]
    DegeneratePhones,

    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("training diverged at step {step}; last good checkpoint at {checkpoint:?}")]
    Diverged {
        step: u64,
        checkpoint: Option<PathBuf>,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("bad file format in {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("wav error in {path:?}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
