use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bad magic: expected \"QMT1\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("truncated header: declared {declared} bytes, found {found}")]
    TruncatedHeader { declared: usize, found: usize },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unexpected container kind: expected {expected}, found {found}")]
    WrongKind { expected: &'static str, found: String },

    #[error("degenerate dataset: maximum magnitude is zero")]
    DegenerateDataset,

    #[error("center exceeds budget: {center} center lines but only {budget} lines per echo")]
    CenterExceedsBudget { center: usize, budget: usize },

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse classification used by the command-line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Io,
    Numeric,
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Invalid(_) | Error::CenterExceedsBudget { .. } => ErrorKind::Usage,
            Error::DegenerateDataset | Error::Diverged(_) => ErrorKind::Numeric,
            Error::ShapeMismatch(_) => ErrorKind::Usage,
            Error::BadMagic { .. }
            | Error::TruncatedPayload { .. }
            | Error::TruncatedHeader { .. }
            | Error::Header(_)
            | Error::WrongKind { .. }
            | Error::Io { .. }
            | Error::Csv(_) => ErrorKind::Io,
        }
    }
}
