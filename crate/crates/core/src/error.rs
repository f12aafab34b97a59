use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, lengths, ranges).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A value went NaN or infinite.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A file on disk does not match its declared layout.
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported version: {0}")]
    UnsupportedVersion(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable tag, used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Format(_) => "format",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
