use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed an out-of-range index, mismatched dimensions or an invalid step size.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A computation produced a non-finite value or a factorization failed.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A structural assumption of the algorithm (graph connectivity, definiteness) does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The requested operation needs information a model does not provide.
    #[error("missing capability: {0}")]
    Capability(String),

    /// Scenario configuration is malformed. Every violation found is listed.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefix the message with where the failure happened (agent, round, MPC step).
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Argument(m) => Error::Argument(format!("{ctx}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Precondition(m) => Error::Precondition(format!("{ctx}: {m}")),
            Error::Capability(m) => Error::Capability(format!("{ctx}: {m}")),
            Error::Internal(m) => Error::Internal(format!("{ctx}: {m}")),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
