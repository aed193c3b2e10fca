use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("episode already finished")]
    EpisodeDone,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io: {0}")]
    Stream(#[from] std::io::Error),

    #[error("{context}: truncated, expected {expected} bytes but found {actual}")]
    Truncated {
        context: &'static str,
        expected: u64,
        actual: u64,
    },

    #[error("{context}: {message}")]
    Format {
        context: &'static str,
        message: String,
    },

    #[error("protocol error at byte {offset}: {message}")]
    Protocol { offset: usize, message: String },

    #[error("server error {code}: {message}")]
    Remote { code: u16, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            context,
            message: message.into(),
        }
    }
}
