use alloc::string::String;

use crate::sparse::Coord;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("duplicate coordinate ({}, {}, {})", .0.ix, .0.iy, .0.iz)]
    DuplicateCoord(Coord),
    #[error("coordinate ({}, {}, {}) outside grid {grid:?}", .coord.ix, .coord.iy, .coord.iz)]
    CoordOutOfRange { coord: Coord, grid: [usize; 3] },
    #[error("invalid kernel: {0}")]
    InvalidKernel(&'static str),
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("grid {grid:?} too large to densify (limit {limit} cells)")]
    GridTooLarge { grid: [usize; 3], limit: usize },
    #[error("empty kernel spec")]
    EmptySpec,
    #[error("invalid receptive field {0}: must be odd and >= 3")]
    InvalidRf(usize),
    #[error("stage {0} is not a submanifold convolution")]
    NonSubmanifoldStage(usize),
    #[error("loss node is {rows}x{cols}, expected a scalar")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("no ground truth in the requested bucket")]
    NoGroundTruth,
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("loss diverged (non-finite) at step {step}")]
    DivergedLoss { step: usize },
}
