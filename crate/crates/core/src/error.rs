use std::path::PathBuf;

/// Errors raised by volume handling, transforms, losses and registration.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid volume data: {0}")]
    InvalidData(String),

    #[error("grids are not compatible: {0}")]
    Incompatible(String),

    #[error("NIfTI format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("unsupported NIfTI datatype code {code} in {path}")]
    Unsupported { path: PathBuf, code: i16 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("mask selects no voxels")]
    EmptyRoi,

    #[error("volume has a degenerate intensity range (min == max = {0})")]
    DegenerateRange(f64),

    #[error("intensity {value} outside the normalized range [0, 1]")]
    Domain { value: f64 },

    #[error("loss is not differentiable: {0}")]
    NonDifferentiable(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("optimization diverged in stage {stage} at iteration {iteration}")]
    Diverged { stage: usize, iteration: usize },

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
