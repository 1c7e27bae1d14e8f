//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("zero self-tuning scale at point {0} (duplicate points?)")]
    ZeroScale(usize),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("index {index} out of range for {n} nodes")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("non-positive degree at node {0}")]
    NonPositiveDegree(usize),

    #[error("eigensolver did not converge: {0}")]
    ConvergenceFailure(String),

    #[error("dense spectrum requested for n={n}, above cap {cap}")]
    TooLarge { n: usize, cap: usize },

    #[error("eigenvalue gaps below floor for pairs {0:?}; eigenvector rates undefined near crossings")]
    NearCrossing(Vec<(usize, usize)>),

    #[error("graph is not block-diagonal: total cross-block weight {0:.3e}")]
    NotBlockDiagonal(f64),

    #[error("I-eigen-gap too small for the finite-difference step: {0}")]
    GapTooSmall(String),

    #[error("bad cluster fraction: {0}")]
    BadFraction(String),

    #[error("patch size {patch} exceeds image dimensions {h}x{w}")]
    PatchTooLarge { patch: usize, h: usize, w: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("LAPACK {routine} returned info={info}")]
    Lapack { routine: &'static str, info: i32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
