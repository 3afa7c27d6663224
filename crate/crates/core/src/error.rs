use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported NIfTI input: {0}")]
    Nifti(String),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("grid mismatch: {field} differs")]
    GridMismatch { field: &'static str },

    #[error("point out of bounds along axis {axis}: {coord} not in [{lo}, {hi}]")]
    OutOfBounds {
        axis: usize,
        coord: f64,
        lo: f64,
        hi: f64,
    },

    #[error("degenerate mask: {0}")]
    DegenerateMask(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("surface not present at level {level}")]
    SurfaceNotPresent { level: f64 },

    #[error("node {node} out of bounds: {reason}")]
    NodeOutOfBounds { node: usize, reason: String },

    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("index {index} out of range for {len} rows in {context}")]
    Index {
        context: &'static str,
        index: usize,
        len: usize,
    },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("diverged: non-finite value in {0}")]
    Diverged(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
