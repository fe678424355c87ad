use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}, row {row} ({subject}): {message}")]
    ManifestRow {
        path: PathBuf,
        row: usize,
        subject: String,
        message: String,
    },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("shape mismatch: volume is {got:?}, expected {expected:?}")]
    ShapeMismatch { got: [usize; 3], expected: [usize; 3] },

    #[error("cannot standardize a constant volume (sd = 0)")]
    ConstantVolume,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("curriculum: {0}")]
    Curriculum(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("backbone config mismatch in field(s): {0}")]
    ConfigMismatch(String),

    #[error("training diverged in episode {episode}, epoch {epoch}: {detail}")]
    Divergence {
        episode: usize,
        epoch: usize,
        detail: String,
    },

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
