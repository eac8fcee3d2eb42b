//! Process exit codes and the error type that carries them.

use std::fmt;

use madec::{Error, ProviderError};

pub const OK: u8 = 0;
/// I/O and anything not covered below.
pub const INTERNAL: u8 = 1;
pub const CONFIG: u8 = 2;
/// Provider error or malformed protocol frame.
pub const PROTOCOL: u8 = 3;
/// Parity, certificate or replay check failed.
pub const ACCEPTANCE: u8 = 4;
/// Handshake failed, including a vocabulary-size mismatch.
pub const HANDSHAKE: u8 = 5;
/// The provider timed out or the transport broke.
pub const TRANSPORT: u8 = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(CONFIG, message)
    }

    pub fn acceptance(message: impl Into<String>) -> Self {
        Self::new(ACCEPTANCE, message)
    }

    pub fn io(context: &str, e: std::io::Error) -> Self {
        Self::new(INTERNAL, format!("{context}: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Exit code for a library error.
pub fn code_for(e: &Error) -> u8 {
    if let Some(p) = e.provider_error() {
        return match p {
            ProviderError::Handshake(_) | ProviderError::VocabMismatch { .. } => HANDSHAKE,
            ProviderError::Timeout(_) | ProviderError::Transport { .. } => TRANSPORT,
            ProviderError::Malformed(_) | ProviderError::Remote { .. } => PROTOCOL,
        };
    }
    match e {
        Error::InvalidInput(_) | Error::Configuration(_) => CONFIG,
        Error::SuiteGeneration { .. } | Error::Invariant(_) => ACCEPTANCE,
        Error::Task { source, .. } => code_for(source),
        _ => INTERNAL,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::new(code_for(&e), e.to_string())
    }
}
