use thiserror::Error;

/// Errors raised across the sampler.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mutation model: {0}")]
    InvalidModel(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("message sequencing error: {0}")]
    Sequencing(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("oracle guard exceeded: {0}")]
    OracleGuard(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    ///
    /// 1 usage/config, 2 data, 3 internal invariant failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::OracleGuard(_) => 1,
            Error::Parse { .. } | Error::Data(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::InvalidModel(_) | Error::Domain(_) | Error::Estimation(_) => 1,
            Error::InvariantViolation(_) | Error::Sequencing(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
