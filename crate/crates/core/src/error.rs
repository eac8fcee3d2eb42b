use std::time::Duration;

use thiserror::Error;

use crate::harness::Category;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown question id {0}")]
    UnknownQuestion(u64),

    #[error("provider configuration error: {0}")]
    Configuration(String),

    #[error(transparent)]
    Provider(#[from] ProviderError),

    #[error("could not certify a {category} task after {attempts} attempts")]
    SuiteGeneration { category: Category, attempts: u32 },

    #[error("task {task}: {source}")]
    Task {
        task: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// The provider error at the root of this error, if any.
    pub fn provider_error(&self) -> Option<&ProviderError> {
        match self {
            Error::Provider(e) => Some(e),
            Error::Task { source, .. } => source.provider_error(),
            _ => None,
        }
    }
}

/// Failures talking to a (usually remote) logit provider.
///
/// Each kind is distinct so callers can map them to different exit paths.
#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("transport error after {retries} retries: {message}")]
    Transport { retries: u32, message: String },

    #[error("no response within {0:?}")]
    Timeout(Duration),

    #[error("malformed response: {0}")]
    Malformed(String),

    #[error("vocabulary size mismatch: expected {expected}, provider reports {actual}")]
    VocabMismatch { expected: usize, actual: usize },

    #[error("handshake failed: {0}")]
    Handshake(String),

    #[error("provider returned error {code}: {message}")]
    Remote { code: i64, message: String },
}
