use std::io;

use thiserror::Error;

/// Errors produced by the toolkit. Variant names are stable and appear in
/// the CLI's machine-readable error line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("degenerate (zero-norm) vector: {0}")]
    DegenerateVector(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("visibility rule needs {needed} key rows but only {provided} were provided")]
    MissingPseudoKeys { needed: usize, provided: usize },
    #[error("trace has no decode-phase queries")]
    MissingDecodePhase,
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("not a trace file (bad magic)")]
    NotATrace,
    #[error("unsupported trace version {found} (max supported {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("corrupt trace: {0}")]
    CorruptTrace(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short stable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDimension(_) => "InvalidDimension",
            Error::NonFiniteInput(_) => "NonFiniteInput",
            Error::DegenerateVector(_) => "DegenerateVector",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::InvalidInput(_) => "InvalidInput",
            Error::MissingPseudoKeys { .. } => "MissingPseudoKeys",
            Error::MissingDecodePhase => "MissingDecodePhase",
            Error::InvalidTrace(_) => "InvalidTrace",
            Error::NotATrace => "NotATrace",
            Error::UnsupportedVersion { .. } => "UnsupportedVersion",
            Error::CorruptTrace(_) => "CorruptTrace",
            Error::Io(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_config(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

pub(crate) fn invalid_dim(msg: impl Into<String>) -> Error {
    Error::InvalidDimension(msg.into())
}
