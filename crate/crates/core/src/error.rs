use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label space `{0}` is empty")]
    EmptyLabelSpace(String),

    #[error("duplicate class name `{name}` in label space `{dataset}`")]
    DuplicateClass { dataset: String, name: String },

    #[error("no embedding for label `{0}`")]
    MissingEmbedding(String),

    #[error("class `{0}` embedding coincides with the NULL embedding")]
    DegenerateEmbedding(String),

    #[error("row {0} has zero norm")]
    ZeroRow(usize),

    #[error("embedding table is empty")]
    EmptyTable,

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("dataset `{0}` registered twice")]
    DuplicateDataset(String),

    #[error("invalid loss value {value} for dataset `{dataset}`")]
    InvalidLoss { dataset: String, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset `{0}` has an empty evaluation split")]
    EmptySplit(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("training diverged at step {step}: loss is {value}")]
    Diverged { step: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<String>, msg: impl std::fmt::Display) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    pub(crate) fn from_json(path: &std::path::Path, err: serde_json::Error) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            msg: format!("line {} column {}: {}", err.line(), err.column(), err),
        }
    }
}
