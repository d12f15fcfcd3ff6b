use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("line {line}: duplicate document (user_id={user_id:?}, doc_id={doc_id:?})")]
    DuplicateDocument {
        line: usize,
        user_id: String,
        doc_id: String,
    },

    #[error("invalid vocabulary file: {0}")]
    InvalidVocabulary(String),

    #[error("vocabulary mismatch: corpus encoded with {corpus} ids, model expects {model}")]
    VocabMismatch { corpus: usize, model: usize },

    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("invalid model configuration: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty training set: every user was excluded")]
    EmptyTrainingSet,

    #[error("owner of row {row} cannot be established: {reason}")]
    UnknownOwner { row: usize, reason: String },

    #[error("partition {partition} failed: {source}")]
    Partition {
        partition: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("partition {0} missing from merge input")]
    MissingPartition(usize),

    #[error("adapter protocol error: {0}")]
    Protocol(String),

    #[error("report row {row}: {message}")]
    Report { row: usize, message: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
