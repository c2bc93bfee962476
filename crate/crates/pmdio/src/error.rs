use std::path::PathBuf;

use thiserror::Error;

/// Unified error type for the library.
///
/// The CLI maps these onto exit codes; see `main.rs`. Corruption variants
/// carry enough context to locate the damage on disk.
#[derive(Debug, Error)]
pub enum Error {
    #[error("series already exists: {0}")]
    AlreadyExists(PathBuf),

    #[error("no series at {0}")]
    NoSeries(PathBuf),

    #[error("corrupt step index: {0}")]
    CorruptIndex(String),

    #[error("corrupt chunk in subfile {subfile} at offset {offset}: {reason}")]
    CorruptChunk {
        subfile: String,
        offset: u64,
        reason: String,
    },

    #[error("write verification failed in {subfile} at offset {offset}")]
    CorruptWrite { subfile: String, offset: u64 },

    #[error("readback verification failed: {0}")]
    VerifyFailed(String),

    #[error("unknown codec id {0}")]
    UnknownCodec(u16),

    #[error("codec decode failed: {0}")]
    DecodeError(String),

    #[error("collective mismatch: {0}")]
    CollectiveMismatch(String),

    #[error("group fault originating on rank {rank}: {reason}")]
    GroupFault { rank: usize, reason: String },

    #[error("iteration {0} is closed")]
    IterationClosed(u64),

    #[error("iteration {open} is still open, close it before opening {requested}")]
    IterationBusy { open: u64, requested: u64 },

    #[error("no open iteration")]
    NoOpenIteration,

    #[error("{0} is already defined")]
    AlreadyDefined(String),

    #[error("{0} is not defined")]
    NotDefined(String),

    #[error("invalid extent: {0}")]
    InvalidExtent(String),

    #[error("datatype mismatch: expected {expected}, got {got}")]
    TypeMismatch { expected: String, got: String },

    #[error("chunk out of bounds: {0}")]
    OutOfBounds(String),

    #[error("series is not writable")]
    NotWritable,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    ParseError(String),

    #[error("no checkpoint present in {0}")]
    NoCheckpoint(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors that indicate on-disk damage rather than misuse.
    pub fn is_corruption(&self) -> bool {
        matches!(
            self,
            Error::CorruptIndex(_)
                | Error::CorruptChunk { .. }
                | Error::CorruptWrite { .. }
                | Error::VerifyFailed(_)
                | Error::DecodeError(_)
                | Error::UnknownCodec(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
