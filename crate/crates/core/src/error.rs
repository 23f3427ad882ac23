use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("tile of size {tile} does not fit in {width}x{height} image")]
    TileTooLarge { tile: usize, width: usize, height: usize },

    #[error("a {rows}x{cols} grid of {tile}px tiles cannot cover a {width}x{height} image")]
    GridCannotCover {
        rows: usize,
        cols: usize,
        tile: usize,
        width: usize,
        height: usize,
    },

    #[error("pixel ({x}, {y}) is equidistant from two palette entries")]
    AmbiguousColor { x: usize, y: usize },

    #[error("even kernel size {0}")]
    EvenKernel(usize),

    #[error("correction point ({x}, {y}) outside {width}x{height} image")]
    PointOutOfBounds { x: i64, y: i64, width: usize, height: usize },

    #[error("no separating boundary within {radius}px of merge point ({x}, {y})")]
    NoSeparatingBoundary { x: usize, y: usize, radius: usize },

    #[error("split point ({x}, {y}) is not inside a foreground region")]
    SplitOutsideRegion { x: usize, y: usize },

    #[error("no straight cut through ({x}, {y}) divides its region in two")]
    SplitNotPossible { x: usize, y: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("degenerate variance")]
    DegenerateVariance,

    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("{count} annotation(s) still awaiting review")]
    PendingApprovals { count: usize, tiles: Vec<String> },

    #[error("manifest integrity violated: {0}")]
    Integrity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
