use std::path::PathBuf;

use thiserror::Error;

use crate::lattice::SitePoint;
use crate::walk::PathRecord;
use crate::wilson::TreeState;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("net finer than mesh: radius {radius} < delta {delta}")]
    NetFinerThanMesh { radius: f64, delta: f64 },

    #[error("mesh too coarse for M: delta = 1/{n} is not < 1/{m}")]
    MeshTooCoarse { n: u32, m: u32 },

    #[error("site {0} lies outside the domain")]
    OutsideDomain(SitePoint),

    #[error("site {0} is not part of the tree")]
    UnknownSite(SitePoint),

    #[error("walk exceeded its step cap of {cap} steps")]
    StepCapExceeded { cap: u64, partial: Box<PathRecord> },

    #[error("wilson walk exceeded its step cap of {cap} steps")]
    TreeStepCapExceeded { cap: u64, partial: Box<TreeState> },

    #[error("window exceeds the sampled domain")]
    WindowExceedsDomain,

    #[error("graph is disconnected")]
    Disconnected,

    #[error("graph too large for the exact oracle: {0}")]
    OracleGuard(String),

    #[error("increase samples: expected count {expected:.3} < 5")]
    IncreaseSamples { expected: f64 },

    #[error("need at least {needed} distinct scales, got {got}")]
    TooFewScales { needed: usize, got: usize },

    #[error("insufficient records for n = {n}: {got} < {needed}")]
    InsufficientRecords { n: u32, got: usize, needed: usize },

    #[error("dimension {0} rendering requires an axis-aligned slab projection")]
    ProjectionRequired(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            err: source,
        }
    }
}
