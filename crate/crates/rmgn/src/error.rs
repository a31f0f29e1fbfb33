use thiserror::Error;

#[derive(Debug, Error)]
pub enum RmgnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("image decode failed for {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },

    #[error("image encode failed for {path}: {source}")]
    Encode {
        path: String,
        #[source]
        source: image::ImageError,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}; last good checkpoint: {last_checkpoint}")]
    NonFiniteLoss { step: u64, last_checkpoint: String },
}

pub type Result<T> = std::result::Result<T, RmgnError>;

impl RmgnError {
    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        RmgnError::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        RmgnError::Io {
            path: path.into(),
            source,
        }
    }
}
