use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not line up (including zero-sized dimensions).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an API contract, e.g. asked for the gradient of a non-scalar root.
    #[error("contract error: {0}")]
    Contract(String),

    /// A function under evaluation produced a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("frequency weight overflow at (u={u}, v={v}): exponent {exponent}")]
    Overflow { u: usize, v: usize, exponent: f64 },

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("invalid tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
