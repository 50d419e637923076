use thiserror::Error;

/// Errors raised by the simulation and equalization stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid configuration: {0}")]
    Configuration(String),
    #[error("adaptation diverged: {0}")]
    Adaptation(String),
    #[error("synchronization failed: {0}")]
    Sync(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}

impl Clone for Error {
    fn clone(&self) -> Self {
        match self {
            Error::Parameter(m) => Error::Parameter(m.clone()),
            Error::Configuration(m) => Error::Configuration(m.clone()),
            Error::Adaptation(m) => Error::Adaptation(m.clone()),
            Error::Sync(m) => Error::Sync(m.clone()),
            Error::Numeric(m) => Error::Numeric(m.clone()),
            Error::Format(m) => Error::Format(m.clone()),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), e.to_string())),
        }
    }
}
