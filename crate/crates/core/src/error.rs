use std::io;

/// Errors produced by the imaging transformer toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("incomplete layout metadata: {0}")]
    Metadata(String),

    #[error("value is not part of this graph: {0}")]
    Unrecorded(String),

    #[error("infeasible target: {0}")]
    Infeasible(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "non_finite",
            Error::Metadata(_) => "metadata",
            Error::Unrecorded(_) => "unrecorded",
            Error::Infeasible(_) => "infeasible",
            Error::Empty(_) => "empty",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
