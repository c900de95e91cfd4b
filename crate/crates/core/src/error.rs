use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, counts, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty reduction over zero points")]
    EmptyReduction,

    #[error("non-finite value produced by node #{index} ({op})")]
    NonFinite { index: usize, op: &'static str },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("view generation failed: {0}")]
    Generation(String),

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated blob {}: expected {expected} bytes, found {found}", file.display())]
    TruncatedBlob {
        file: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("manifest lists {manifest} entries but {found} were found on disk")]
    CountMismatch { manifest: usize, found: usize },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::VersionMismatch { .. }
            | Error::TruncatedBlob { .. }
            | Error::CountMismatch { .. }
            | Error::Manifest(_)
            | Error::Io { .. }
            | Error::Generation(_) => 3,
            Error::EmptyReduction | Error::NonFinite { .. } | Error::Numeric(_) => 4,
        }
    }
}
