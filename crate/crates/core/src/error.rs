use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed NRRD header: {0}")]
    NrrdHeader(String),
    #[error("unsupported NRRD content: {0}")]
    NrrdUnsupported(String),
    #[error("NRRD payload size mismatch: header declares {expected} scalars, payload holds {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("invalid case manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("seed {seed:?} has HU {hu}, outside the growth range [{lo}, {hi}]")]
    SeedOutOfRange { seed: [usize; 3], hu: i32, lo: i32, hi: i32 },
    #[error("region growth exceeded the cap of {cap} voxels (probable leak)")]
    GrowthCapExceeded { cap: usize },
    #[error("tracking objective is not finite at frame {frame} (template sampled outside the volume)")]
    NonFiniteObjective { frame: usize },
    #[error("mesh is not watertight: {0} edges are not shared by exactly two triangles")]
    NotWatertight(usize),
    #[error("mesh vertex {index} lies outside the cage rest box")]
    OutsideCage { index: usize },
    #[error("predictor failed: {0}")]
    Predictor(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Failures of an algorithm on otherwise valid data (leaks, divergent
    /// objectives, failed predictors), as opposed to bad inputs.
    pub fn is_algorithmic(&self) -> bool {
        matches!(
            self,
            Error::GrowthCapExceeded { .. } | Error::NonFiniteObjective { .. } | Error::Predictor(_)
        )
    }
}
