use std::io;
use std::path::PathBuf;

use crate::archive::ArchiveError;

/// Process exit status for each error class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const DATA: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Core(#[from] evomerge_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    /// Invalid configuration or flags.
    #[error("{context}: {reason}")]
    Config { context: String, reason: String },
    #[error("{0}")]
    Usage(String),
    /// Well-formed request over inconsistent or malformed data.
    #[error("{0}")]
    Data(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn io_code(e: &io::Error) -> i32 {
    match e.kind() {
        io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied => exit::USAGE,
        _ => exit::INTERNAL,
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(context: impl Into<String>, reason: impl ToString) -> Self {
        Error::Config {
            context: context.into(),
            reason: reason.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        use evomerge_core::Error as Core;
        match self {
            Error::Archive(ArchiveError::Io { source, .. }) => io_code(source),
            Error::Archive(_) => exit::DATA,
            Error::Core(Core::InvalidParameter { .. } | Core::EmptyCorpus) => exit::USAGE,
            Error::Core(_) => exit::DATA,
            Error::Io { source, .. } => io_code(source),
            Error::Config { .. } | Error::Usage(_) => exit::USAGE,
            Error::Data(_) | Error::Evaluation(_) => exit::DATA,
            Error::Internal(_) => exit::INTERNAL,
        }
    }

    /// True for missing keys, shape mismatches and other merge-domain errors.
    pub fn is_alignment(&self) -> bool {
        use evomerge_core::Error as Core;
        matches!(
            self,
            Error::Core(
                Core::MissingKey { .. } | Core::ShapeMismatch { .. } | Core::DomainMismatch
            )
        )
    }
}
