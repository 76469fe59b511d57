use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error classes, used by the command line to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad arguments or configuration.
    Usage,
    /// Input data failed validation.
    Data,
    /// I/O or numeric failure not attributable to the caller.
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}:{line}: {source}")]
    At {
        path: String,
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed record: {0}")]
    Malformed(String),

    #[error("duplicate tweet id {0:?}")]
    DuplicateId(String),

    #[error("tweet {0:?} has empty text")]
    EmptyText(String),

    #[error("unknown tweet id {0:?}")]
    UnknownTweet(String),

    #[error("span [{start}, {end}) is invalid for tweet {tweet_id:?} of length {len}")]
    SpanBounds {
        tweet_id: String,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("span [{start}, {end}) of tweet {tweet_id:?}: expected surface {expected:?}, text has {actual:?}")]
    SliceMismatch {
        tweet_id: String,
        start: usize,
        end: usize,
        expected: String,
        actual: String,
    },

    #[error("overlapping spans in tweet {tweet_id:?}: [{}, {}) and [{}, {})", .first.0, .first.1, .second.0, .second.1)]
    OverlappingSpans {
        tweet_id: String,
        first: (usize, usize),
        second: (usize, usize),
    },

    #[error("spans from different tweets: {0:?} and {1:?}")]
    MixedTweets(String, String),

    #[error("{what}: expected length {expected}, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("tweet {tweet_id:?}: row {row} sums to {sum}, not 1")]
    RowSum {
        tweet_id: String,
        row: usize,
        sum: f64,
    },

    #[error("alignment mismatch for tweet {tweet_id:?}: {message}")]
    Alignment { tweet_id: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training failed: {0}")]
    Training(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a file and 1-based line number.
    pub fn at(self, path: impl Into<String>, line: usize) -> Self {
        Error::At {
            path: path.into(),
            line,
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::At { source, .. } => source.class(),
            Error::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => {
                ErrorClass::Usage
            }
            Error::Io { .. } | Error::Training(_) => ErrorClass::Internal,
            Error::InvalidArgument(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}
