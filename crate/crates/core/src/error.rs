use std::io;
use std::path::PathBuf;

/// Errors produced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum NafError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("position ({row}, {col}) is outside the {height}x{width} grid")]
    Bounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("malformed NPY file: {0}")]
    Format(String),

    #[error("unsupported tensor: {0}")]
    UnsupportedTensor(String),

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("training diverged at stage {stage}, iteration {iteration}: loss = {loss}")]
    Diverged {
        stage: usize,
        iteration: usize,
        loss: f64,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NafError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NafError::Shape(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NafError::Config(msg.into()))
}
