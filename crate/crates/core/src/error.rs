use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed sidecar {path}: {reason}")]
    MalformedSidecar { path: PathBuf, reason: String },
    #[error("raster size mismatch: expected {expected} values, found {found}")]
    RasterSizeMismatch { expected: usize, found: usize },
    #[error("non-finite voxel at raster index {0}")]
    NonFiniteVoxel(usize),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("singular transform")]
    SingularTransform,
    #[error("empty range: {0}")]
    EmptyRange(String),
    #[error("value outside the normalized range [0, 1]: {0}")]
    OutOfRange(f64),
    #[error("unknown network: {0}")]
    UnknownNetwork(String),
    #[error("numerical divergence at step {step}: {what}")]
    Divergence { step: u64, what: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),
    #[error("placement failed: {0}")]
    PlacementFailed(String),
    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure classes, used by the command line to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Divergence { .. } => ErrorClass::Numerical,
            Error::InvalidArgument(_) | Error::UnknownNetwork(_) | Error::InvalidPath(_) => {
                ErrorClass::Usage
            }
            _ => ErrorClass::Data,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
