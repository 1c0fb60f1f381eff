use thiserror::Error;

/// Errors raised by the simulation and verification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or inputs that violate a documented precondition.
    #[error("configuration error: {0}")]
    Config(String),

    /// A mathematical function was evaluated outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Numerical failure during a computation (blow-up, non-convergence).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A matrix that must be invertible is singular to working precision.
    #[error("singular matrix {matrix}: minimum eigenvalue {min_eigenvalue:e} (non-degeneracy (H1) fails or R is below the resolvable scale)")]
    Singular {
        matrix: String,
        min_eigenvalue: f64,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code used by the command line front end.
    ///
    /// `2` for configuration problems, `3` for numerical failures, `1` otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::Serde(_) => 2,
            Error::Numerical(_) | Error::Singular { .. } => 3,
            Error::Io(_) => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
