use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, PsbError>;

/// Errors produced by the engine.
///
/// The variants are grouped so a caller (e.g. the CLI) can map them onto
/// stable exit codes: configuration problems, data problems and model
/// problems are distinguishable without string matching.
#[derive(Debug, Error)]
pub enum PsbError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unfoldable graph: {0}")]
    UnfoldableGraph(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("model format error: {0}")]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Typed container-format failures, kept separate so tests can assert the
/// exact failure class (truncation vs. version vs. shape).
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {found:02x?}, expected 'PSBM'")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated blob: {0}")]
    TruncatedBlob(String),

    #[error("manifest/blob shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad manifest: {0}")]
    Manifest(String),

    #[error("invalid weight code: {0}")]
    InvalidCode(String),
}
