use std::path::PathBuf;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation was called with arguments whose shapes or lengths disagree.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is out of range or inconsistent with another one.
    #[error("configuration error: {0}")]
    Config(String),

    /// The angle parameters carry no positive weight, so no grid can be built.
    #[error("degenerate SPT parameters: {0}")]
    Degenerate(String),

    /// Malformed or empty input data.
    #[error("input error: {0}")]
    Input(String),

    /// The evaluation protocol cannot be run on the supplied samples.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A loss or gradient became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
