use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {message}")]
    Header { path: PathBuf, message: String },

    #[error("data length mismatch in {path}: expected {expected} values, found {found} bytes")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch {
        expected: &'static str,
        found: String,
    },

    #[error("invalid label value {value} at linear index {index} (labels must be 0 or 1)")]
    InvalidLabel { index: usize, value: u8 },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("bounding box {0}")]
    InvalidBox(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no foreground voxels in any label volume")]
    EmptyForeground,

    #[error("no {0} samples available")]
    EmptyClass(&'static str),

    #[error("dense solve limited to {limit} nodes, graph has {nodes}")]
    TooLarge { nodes: usize, limit: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by files on disk rather than by invalid
    /// inputs or configuration.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Header { .. }
                | Error::LengthMismatch { .. }
                | Error::UnknownDtype(_)
                | Error::DtypeMismatch { .. }
                | Error::InvalidLabel { .. }
        )
    }
}
