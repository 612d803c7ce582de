//! Error type shared by every module, with the process exit-code mapping used
//! by the command-line surface.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PdssError {
    /// Tensor extents do not line up (wrong rank, wrong channel count, ...).
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A value-level precondition was violated (bad flag, bad config field,
    /// zero extent, delta <= 0, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A NaN or infinity showed up where the numeric contract forbids it.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// A tensor fixture file is malformed (bad magic, truncation, ...).
    #[error("malformed tensor file: {0}")]
    BadFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PdssError>;

impl PdssError {
    /// Process exit code: 0 is success, 2 validation failure, 3 i/o failure,
    /// 4 numeric failure (non-finite values).
    pub fn exit_code(&self) -> i32 {
        match self {
            PdssError::ShapeMismatch(_) | PdssError::InvalidArgument(_) => 2,
            PdssError::BadFile(_) | PdssError::Io(_) | PdssError::Json(_) => 3,
            PdssError::NonFinite(_) => 4,
        }
    }
}
