use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown instance id {0}")]
    UnknownInstance(u32),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("degenerate feature channel {0}")]
    DegenerateChannel(usize),

    #[error("channel {index} out of range (have {count})")]
    ChannelOutOfRange { index: usize, count: usize },

    #[error("input size must be divisible by 4 (got {height}x{width})")]
    IndivisibleInput { height: usize, width: usize },

    #[error("forward output carries no activation cache")]
    MissingCache,

    #[error("scene too crowded: placed {placed} of at least {required} nuclei")]
    SceneTooCrowded { placed: usize, required: usize },

    #[error("no labeled scenes in training set")]
    NoLabeledScenes,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("malformed tensor file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
