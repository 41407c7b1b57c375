use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("empty mask")]
    EmptyMask,

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("non-finite value in image {image_id} at voxel {voxel_index}")]
    NonFinite { image_id: String, voxel_index: usize },

    #[error("design: {0}")]
    Design(String),

    #[error("{path}: nifti: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error("{path}: row {row}, column {column:?}: {message}")]
    Table {
        path: PathBuf,
        row: u64,
        column: String,
        message: String,
    },

    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("statistics: {0}")]
    Stats(String),

    #[error("harmonize: {0}")]
    Harmonize(String),

    #[error("report: {0}")]
    Report(String),

    #[error("synth: {0}")]
    Synth(String),

    #[error("{path}: json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
