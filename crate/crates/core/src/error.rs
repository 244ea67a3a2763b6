use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("usage: {0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("frame of {frame_h}x{frame_w} is smaller than crop {crop_h}x{crop_w}")]
    CropTooLarge {
        frame_h: usize,
        frame_w: usize,
        crop_h: usize,
        crop_w: usize,
    },
    #[error("CAT block {block}: expected {expected} tokens per frame, got {got}")]
    TokenCount {
        block: usize,
        expected: usize,
        got: usize,
    },
    #[error("text {text:?} needs {tokens} tokens, context length is {context_len}")]
    ContextOverflow {
        text: String,
        tokens: usize,
        context_len: usize,
    },
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("{value} is outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("degenerate range [{lo}, {hi}]")]
    DegenerateRange { lo: f64, hi: f64 },
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("score regressor has not been fitted")]
    NotFitted,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}
