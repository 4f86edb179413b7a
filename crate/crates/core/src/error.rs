use std::path::PathBuf;

use thiserror::Error;

use crate::grammar::ParseError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("unknown surface character {0:?}")]
    UnknownSymbol(char),

    #[error("invalid grammar: {0}")]
    InvalidGrammar(String),

    #[error("rejection budget exhausted after {attempts} attempts ({what})")]
    RejectionBudget { attempts: usize, what: String },

    #[error("node {0} is not part of the tree")]
    UnknownNode(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} mismatch: {detail}")]
    Mismatch { what: &'static str, detail: String },

    #[error("sequence of {len} tokens exceeds the model's {max} positions")]
    Overlength { len: usize, max: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
