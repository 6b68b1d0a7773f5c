use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nd(#[from] ndgrad::NdError),

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}: line {line}: malformed pore coordinate {content:?}")]
    MalformedPoreLine {
        path: PathBuf,
        line: usize,
        content: String,
    },

    #[error("pore ({row}, {col}) lies outside a {rows}x{cols} image")]
    PoreOutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("duplicate pore coordinate ({row}, {col})")]
    DuplicatePore { row: usize, col: usize },

    #[error("{path}: unsupported image format or depth ({detail})")]
    UnsupportedImage { path: PathBuf, detail: String },

    #[error("image {rows}x{cols} is smaller than the {size}x{size} patch")]
    ImageTooSmall { rows: usize, cols: usize, size: usize },

    #[error("could not place {wanted} non-overlapping pores (placed {placed}) after {attempts} attempts")]
    PorePlacement {
        wanted: usize,
        placed: usize,
        attempts: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: u64, detail: String },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
