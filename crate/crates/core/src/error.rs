use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A mathematical quantity is undefined at the requested point.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller violated an operation precondition (shapes, counts, ranges).
    #[error("contract error: {0}")]
    Contract(String),

    /// Malformed BTEN payload.
    #[error("format error at offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("config error at line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite gradient at step {step} (parameter {param})")]
    NonFiniteGradient { step: u64, param: String },

    #[error("generation error: {0}")]
    Generation(String),

    /// Inputs are individually valid but inconsistent with each other.
    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    }};
}

macro_rules! domain {
    ($cond:expr, $($arg:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err($crate::error::Error::Domain(format!($($arg)+)));
        }
    }};
}

pub(crate) use contract;
pub(crate) use domain;
