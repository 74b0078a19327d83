use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid ground-truth box {0:?}: width and height must be positive")]
    InvalidGroundTruth([f64; 4]),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("region of interest {0:?} lies entirely outside the feature map")]
    EmptyRoi([f64; 4]),

    #[error("cannot trim `{0}`: not an auxiliary layer of this head")]
    InvalidTrim(String),

    #[error("could not place a `{class}` particle after {attempts} attempts without exceeding the overlap limit")]
    PlacementFailure { class: String, attempts: usize },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("unknown particle class `{0}`")]
    UnknownClass(String),

    #[error("non-finite gradient at iteration {iteration} in `{layer}`")]
    NonFiniteGradient { iteration: u64, layer: String },

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged {
        iteration: u64,
        loss: f64,
        last_good: Box<crate::nets::checkpoint::Checkpoint>,
    },

    #[error("split needs at least 3 records, got {0}")]
    Split(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
