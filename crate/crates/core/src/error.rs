use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum GhnError {
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("0.5 has no finite inverse under the hamming group")]
    SingularInverse,

    #[error("domain error in {context}: {message}")]
    Domain {
        context: &'static str,
        message: String,
    },

    #[error("shape mismatch in {context}: {message}")]
    ShapeMismatch {
        context: &'static str,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer {layer} failed to compose: {message}")]
    Composition { layer: usize, message: String },

    #[error("data format error: {0}")]
    DataFormat(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GhnError>;
