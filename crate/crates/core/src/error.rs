use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid attribute list: {0}")]
    Axis(String),

    #[error("no word reaches the minimum frequency of {min_freq}")]
    EmptyVocabulary { min_freq: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("nothing to score: {0}")]
    Empty(String),

    #[error("invalid parameter budget: {0}")]
    Budget(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("axis mismatch: module trained for {module}, task annotated for {task}")]
    AxisMismatch { module: String, task: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
