//! Error type shared by every module of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Vector/tensor dimensions do not agree.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A binary file does not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },

    /// A binary file ends before its declared payload.
    #[error("truncated file: needed {needed} bytes, got {got}")]
    Truncated { needed: u64, got: u64 },

    /// Unknown version field in a binary header.
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    /// Header dimensions are zero, absurdly large, or overflow the payload size.
    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    /// Header declares dimensions the format does not allow.
    #[error("invalid format dimensions: {0}")]
    InvalidFormatDimensions(String),

    /// Two control points coincide (within 1e-9), so the kernel matrix is singular.
    #[error("duplicate control points {i} and {j} (distance {dist:.3e})")]
    DuplicateControlPoints { i: usize, j: usize, dist: f64 },

    /// Control points span fewer than 3 dimensions; the TPS system has no unique solution.
    #[error("control points are coplanar or collinear; TPS fit rejected")]
    CoplanarControlPoints,

    /// A linear system is too ill-conditioned to trust.
    #[error("ill-conditioned system in {context} (condition estimate {cond:.3e})")]
    IllConditioned { context: &'static str, cond: f64 },

    /// A matrix that must be invertible is numerically singular.
    #[error("singular matrix in {0}")]
    Singular(&'static str),

    /// A point lies outside the domain an operation requires.
    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    /// Triangulation needs at least two views.
    #[error("need at least 2 views for triangulation, got {0}")]
    InsufficientViews(usize),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by malformed or mis-typed input files.
    pub fn is_format(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::Truncated { .. }
                | Error::UnsupportedVersion(_)
                | Error::DimensionOverflow(_)
                | Error::InvalidFormatDimensions(_)
                | Error::Json(_)
        )
    }

    /// True for errors raised by numerical guards (singularity, conditioning).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DuplicateControlPoints { .. }
                | Error::CoplanarControlPoints
                | Error::IllConditioned { .. }
                | Error::Singular(_)
                | Error::InsufficientViews(_)
        )
    }
}
