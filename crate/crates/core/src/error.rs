use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the generation, training and evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("linear system is rank deficient (singular value ratio {0:.3e})")]
    RankDeficient(f64),
    #[error("matrix is singular (|det| = {0:.3e})")]
    SingularMatrix(f64),
    #[error("point ({0}, {1}) maps to infinity")]
    PointAtInfinity(f64, f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("band has zero total weight")]
    EmptyBand,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("loss became non-finite at {0}")]
    NonFiniteLoss(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("TOML error: {0}")]
    Toml(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the caller's inputs rather than by the library.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::EmptyDataset(_)
                | Error::InvalidConfig(_)
                | Error::Io { .. }
                | Error::Image { .. }
                | Error::Json(_)
                | Error::Toml(_)
                | Error::DimensionMismatch(_)
                | Error::InsufficientData(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
