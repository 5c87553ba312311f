use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation. The detail
    /// string reports the offending shapes so callers can log it verbatim.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A parameter is out of its documented range (zero stride, even pooling
    /// on odd extent, window larger than the map, and so on).
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Configuration validation failed. Every problem found is listed, not
    /// just the first one.
    #[error("invalid configuration:\n  {}", issues.join("\n  "))]
    Config { issues: Vec<String> },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file had the right extension but the wrong contents. `line` is
    /// 1-based; 0 means the problem is not tied to a single line.
    #[error("{}:{line}: {detail}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("checkpoint {}: {detail}", path.display())]
    Checkpoint { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, detail: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            detail: detail.into(),
        }
    }
}
