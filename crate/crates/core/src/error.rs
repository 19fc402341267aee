use thiserror::Error;

/// Failure modes shared by every numeric routine in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a precondition: wrong shape, empty batch, bad hyperparameter.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("symmetric eigensolver did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },

    /// A dense materialization was requested beyond the configured size limit.
    #[error("{what}: dimension {requested} exceeds the limit of {limit}")]
    Resource {
        what: &'static str,
        requested: usize,
        limit: usize,
    },

    /// An operation needed state (eigenbasis, scalings, moments) that was never computed.
    #[error("invalid optimizer state: {0}")]
    State(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
