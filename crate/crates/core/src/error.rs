//! Error type shared across the workspace.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav: {0}")]
    Wav(String),

    #[error("audio: {0}")]
    Audio(String),

    #[error("config: {0}")]
    Config(String),

    #[error("shape mismatch for {name}: expected {expected}, got {got}")]
    Shape {
        name: String,
        expected: String,
        got: String,
    },

    #[error("quantizer: {0}")]
    Quantizer(String),

    #[error("{file_kind}: bad field `{field}`: {msg}")]
    Format {
        file_kind: &'static str,
        field: String,
        msg: String,
    },

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error("{0}")]
    Invalid(String),
}

impl CodecError {
    pub fn shape(name: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        CodecError::Shape {
            name: name.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn format(file_kind: &'static str, field: impl Into<String>, msg: impl Into<String>) -> Self {
        CodecError::Format {
            file_kind,
            field: field.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CodecError>;
