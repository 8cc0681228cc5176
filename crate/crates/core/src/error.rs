use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch between operands")]
    GridMismatch,

    #[error("ball radius {radius} must be below half the side length {half_side}")]
    RadiusTooLarge { radius: f64, half_side: f64 },

    #[error("axis {axis} out of range for a {dim}-d grid")]
    InvalidAxis { axis: usize, dim: usize },

    #[error("point lies outside the torus: {0}")]
    OutsideTorus(String),

    #[error("empty phase")]
    EmptyPhase,

    #[error("degenerate phase: {0}")]
    DegeneratePhase(&'static str),

    #[error("target of {target} cells out of range (grid has {total} cells)")]
    TargetOutOfRange { target: usize, total: usize },

    #[error("invalid surface tensions: {0}")]
    InvalidTensions(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("need at least {needed} samples, got {got}")]
    NotEnoughSamples { needed: usize, got: usize },

    #[error("time {t} is past the extinction time {extinction}")]
    PastExtinction { t: f64, extinction: f64 },

    #[error("no triple junction found in the window")]
    JunctionNotFound,

    #[error("{0} separate triple junctions found in the window")]
    MultipleJunctions(usize),
}
