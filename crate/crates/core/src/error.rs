use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown entity: {0}")]
    UnknownEntity(String),

    #[error("unknown relation: {0}")]
    UnknownRelation(String),

    #[error("no tails for relation {relation} from entity {entity}")]
    Transit { entity: String, relation: String },

    #[error("{path}:{line}: gold path does not execute: {message}")]
    Validation {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("generation infeasible: {0}")]
    Infeasible(String),

    #[error("empty question")]
    EmptyQuestion,

    #[error("empty relation path")]
    EmptyPath,

    #[error("attentive update requested without stored attention weights")]
    MissingAttention,

    #[error("backward called without a recorded forward pass")]
    NoForward,

    #[error("topic entity {0} has no outbound relations")]
    SinkTopic(String),

    #[error("path enumeration exceeded budget of {budget} paths")]
    Budget { budget: usize },

    #[error("non-finite loss on example {example}: {value}")]
    NonFinite { example: usize, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
