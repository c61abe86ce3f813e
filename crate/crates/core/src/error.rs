use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("voxel ({i}, {j}, {k}) outside grid {dims:?}")]
    Index {
        i: usize,
        j: usize,
        k: usize,
        dims: [usize; 3],
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("value outside domain: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bad NIfTI magic in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated NIfTI payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("invalid NIfTI header: {0}")]
    InvalidHeader(String),
    #[error("gradient file: {0}")]
    GradientFormat(String),

    #[error("degenerate direction pair ({0}, {1}): coincident or antipodal")]
    DegeneratePair(usize, usize),
    #[error("not enough directions: need {needed}, shell has {available}")]
    TooFewDirections { needed: usize, available: usize },
    #[error("invalid direction: {0}")]
    InvalidDirection(String),

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("zero total mass")]
    ZeroMass,
    #[error("mass mismatch: {0} vs {1}")]
    MassMismatch(f64, f64),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Index { .. } => "index",
            Error::InvalidGrid(_) => "invalid-grid",
            Error::GridMismatch(_) => "grid-mismatch",
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::BadMagic(_) => "bad-magic",
            Error::UnsupportedDatatype(_) => "unsupported-datatype",
            Error::TruncatedPayload { .. } => "truncated-payload",
            Error::InvalidHeader(_) => "invalid-header",
            Error::GradientFormat(_) => "gradient-format",
            Error::DegeneratePair(..) => "degenerate-pair",
            Error::TooFewDirections { .. } => "too-few-directions",
            Error::InvalidDirection(_) => "invalid-direction",
            Error::Config(_) => "config",
            Error::Divergence(_) => "divergence",
            Error::ZeroMass => "zero-mass",
            Error::MassMismatch(..) => "mass-mismatch",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
