//! Error types shared across the crate.
//!
//! Contract violations (shape mismatches, misuse of the tape) panic with a
//! descriptive message; everything environmental or data-dependent — file
//! formats, configuration, training divergence — flows through [`Error`].

use thiserror::Error;

/// What went wrong while decoding one of the binary file formats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatErrorKind {
    /// Leading magic bytes did not match the expected tag.
    BadMagic,
    /// Unsupported format version.
    BadVersion(u16),
    /// A section checksum did not match its payload.
    ChecksumMismatch(&'static str),
    /// File ended before the declared payload was complete.
    Truncated,
    /// Two entries share a name.
    DuplicateName(String),
    /// Entries do not match the in-memory structure they are loaded into.
    Mismatch(String),
}

impl std::fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatErrorKind::BadMagic => write!(f, "bad magic"),
            FormatErrorKind::BadVersion(v) => write!(f, "unsupported version {v}"),
            FormatErrorKind::ChecksumMismatch(section) => {
                write!(f, "checksum mismatch in section `{section}`")
            }
            FormatErrorKind::Truncated => write!(f, "file truncated"),
            FormatErrorKind::DuplicateName(n) => write!(f, "duplicate entry name `{n}`"),
            FormatErrorKind::Mismatch(what) => write!(f, "{what}"),
        }
    }
}

#[derive(Error, Debug)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error in {path}: {kind}")]
    Format { path: String, kind: FormatErrorKind },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
