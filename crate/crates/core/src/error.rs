use std::io;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
///
/// Variants are grouped by who is at fault so the CLI can map them onto
/// exit codes: configuration problems, bad inputs, broken invariants and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("modality policy error: {0}")]
    Policy(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Coarse error category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Invariant,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_)
            | Error::Shape { .. }
            | Error::Input(_)
            | Error::Usage(_)
            | Error::Generation(_)
            | Error::Policy(_) => ErrorKind::Config,
            Error::Invariant(_) => ErrorKind::Invariant,
            Error::Format(_) | Error::Io { .. } => ErrorKind::Io,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
