use std::path::PathBuf;

use dit_nn::NnError;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("cannot decode image {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("{what} weights are not loaded")]
    NotLoaded { what: &'static str },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        CoreError::Invalid { op, msg: msg.into() }
    }
}
