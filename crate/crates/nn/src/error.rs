use thiserror::Error;

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("parameter `{0}` not found")]
    MissingParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NnError {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        NnError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        NnError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
