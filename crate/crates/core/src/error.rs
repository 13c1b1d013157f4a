use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload size mismatch: expected {expected} values, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("voxel {index} holds {value}, expected 0 or 1")]
    NonBinaryVoxel { index: usize, value: u8 },
    #[error("invalid spacing {0:?}: every component must be strictly positive")]
    InvalidSpacing([f64; 3]),
    #[error("invalid dimensions {0:?}: every extent must be positive")]
    InvalidDims([usize; 3]),
    #[error("mask has no foreground voxels")]
    EmptyMask,
    #[error("foreground bounding box {bbox:?} does not fit in grid {grid:?}")]
    DoesNotFit { bbox: [usize; 3], grid: [usize; 3] },
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("mask is uniform; no boundary between classes")]
    UniformMask,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate shape: only {0} foreground voxels")]
    DegenerateShape(usize),
    #[error("volume matching failed: best relative deviation {0:.4}")]
    VolumeMatchFailed(f64),
    #[error("cohort generation exhausted retries for index {0}")]
    GenerationExhausted(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("learning-rate schedule overflow: step {step} >= total {total}")]
    StepOverflow { step: usize, total: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },
    #[error("empty cohort")]
    EmptyCohort,
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("only one class present (missing label {missing})")]
    SingleClass { missing: u8 },
    #[error("rank deficient: requested {requested} components, numerical rank {rank}")]
    RankDeficient { requested: usize, rank: usize },
    #[error("invalid fold count k={k} for n={n}")]
    InvalidK { k: usize, n: usize },
    #[error("bootstrap could not draw a two-class resample after {0} retries")]
    ResampleExhausted(usize),
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("empty group: {0}")]
    EmptyGroup(&'static str),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
