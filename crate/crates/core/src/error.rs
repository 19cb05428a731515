use thiserror::Error;

use crate::protocol::ProtocolError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("image format: {0}")]
    Format(String),

    #[error("no entity matched the query")]
    NoMatchingEntity,

    #[error("backend error: {0}")]
    Backend(String),

    #[error("backend error on entity {index}: {source}")]
    Entity {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("all {0} proposals failed")]
    AllProposalsFailed(usize),

    #[error(transparent)]
    Protocol(#[from] ProtocolError),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True when the failure came from a backend being unreachable or
    /// misbehaving, as opposed to bad input.
    pub fn is_backend(&self) -> bool {
        match self {
            Error::Backend(_) | Error::Protocol(_) => true,
            Error::Entity { source, .. } => source.is_backend(),
            _ => false,
        }
    }
}
