use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("pair `{id}`: {detail}")]
    Pairing { id: String, detail: String },

    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {detail}")]
    Training { step: u64, detail: String },

    #[error("environment error: {0}")]
    Environment(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("variant `{variant}` failed: {source}")]
    Variant {
        variant: String,
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
}
