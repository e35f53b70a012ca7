//! Error taxonomy shared by the library and the CLI.
//!
//! `Config` and `Io` map to CLI exit code 2 (usage / configuration),
//! everything else that reaches the top level maps to exit code 3
//! (numerical or internal failure).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, arguments, or file contents under user control.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data violates a domain precondition (e.g. an all-zero field).
    #[error("domain error: {0}")]
    Domain(String),
    /// A numerical procedure failed (singular system, non-finite loss, ...).
    #[error("numerical error: {0}")]
    Numerical(String),
    /// A computation would exceed a hard resource cap.
    #[error("resource limit: {0}")]
    Resource(String),
    /// An internal API contract was violated (caller bug).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Malformed binary artifact (corpus or checkpoint).
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code for this error per the documented contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Format(_) => 2,
            _ => 3,
        }
    }
}
