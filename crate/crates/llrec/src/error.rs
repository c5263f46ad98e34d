use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown dataset format `{0}` (expected movielens-dat, jsonl or tsv)")]
    UnknownFormat(String),
    #[error("{path}: {malformed} of {lines} lines malformed (limit 10%)")]
    TooManyMalformed {
        path: PathBuf,
        malformed: usize,
        lines: usize,
    },
    #[error("{path}: not a {kind} file (bad magic)")]
    BadMagic { path: PathBuf, kind: &'static str },
    #[error("{path}: {kind} format version {found}, this build reads version {expected}")]
    Version {
        path: PathBuf,
        kind: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("{path}: checksum mismatch (file corrupt or truncated)")]
    Checksum { path: PathBuf },
    #[error("{path}: file truncated")]
    Truncated { path: PathBuf },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Missing(String),
    #[error(transparent)]
    Core(#[from] llrec_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
