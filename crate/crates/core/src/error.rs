use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents: bad magic, version, truncation, non-finite payload.
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Inconsistent or invalid input data (shapes, labels, manifest keys).
    #[error("{0}")]
    Data(String),

    /// A statistic or score is undefined for the given data.
    #[error("numeric degeneracy: {0}")]
    Degenerate(String),

    /// Invalid configuration or request.
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for this error class: 2 usage, 3 data, 4 numeric degeneracy.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Data(_) => 3,
            Error::Degenerate(_) => 4,
        }
    }
}
