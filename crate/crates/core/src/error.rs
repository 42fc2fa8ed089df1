use thiserror::Error;

/// Errors raised by the inference engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("value outside the support of {family}: {detail}")]
    Domain { family: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch at layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("degenerate particle system: every log-weight is -inf")]
    Degenerate,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(family: &'static str, detail: impl Into<String>) -> Error {
    Error::Domain { family, detail: detail.into() }
}

pub(crate) fn argument(detail: impl Into<String>) -> Error {
    Error::Argument(detail.into())
}
