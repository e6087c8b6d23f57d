use thiserror::Error;

/// Error type shared across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate diffusion step t={t}: alpha_bar = 1")]
    DegenerateStep { t: usize },

    #[error("unsupported task: {0}")]
    UnsupportedTask(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("non-finite loss at step {step} (value {value})")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
