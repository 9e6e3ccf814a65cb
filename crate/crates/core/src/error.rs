use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("window size {window} does not tile a {height}x{width} feature map")]
    Partition { window: usize, height: usize, width: usize },

    #[error("checkpoint error at byte {offset}: {detail}")]
    Checkpoint { offset: usize, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("image decode error: {0}")]
    Decode(String),

    #[error("training diverged at step {step}: loss term `{term}` is not finite")]
    Divergence { step: u64, term: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
