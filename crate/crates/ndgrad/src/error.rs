use thiserror::Error;

use crate::grid::Shape4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("invalid shape {shape}: every extent must be positive")]
    InvalidShape { shape: Shape4 },
    #[error("backward requires a scalar loss, got shape {shape}")]
    NotScalar { shape: Shape4 },
    #[error("{0}")]
    Invalid(String),
}

impl NdError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        NdError::Shape { op, detail }
    }
}

pub type Result<T, E = NdError> = std::result::Result<T, E>;
