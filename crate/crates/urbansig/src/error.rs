use thiserror::Error;

/// Errors produced by the pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Input bytes do not match the expected file schema.
    #[error("format error: {0}")]
    Format(String),

    /// Geometric input violates an invariant (degenerate ring, zero area).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// An operation was called on input that cannot support it
    /// (empty population, too few points for a fit).
    #[error("insufficient input: {0}")]
    Insufficient(String),

    /// A stated precondition does not hold (e.g. unsorted timestamps).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Configuration value outside its documented range.
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }

    pub(crate) fn insufficient(msg: impl Into<String>) -> Self {
        Error::Insufficient(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
