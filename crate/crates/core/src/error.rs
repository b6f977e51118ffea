use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate diffusion step {step}: {reason}")]
    DegenerateStep { step: usize, reason: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("training diverged in epoch {epoch}: {reason}")]
    TrainingDiverged { epoch: usize, reason: String },

    #[error("unsupported: {0}")]
    Capability(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
