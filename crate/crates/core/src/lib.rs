//! Thresholding (MBO-type) schemes for interface motion on periodic grids.
//!
//! Three schemes beyond the plain MBO baseline are provided: a
//! volume-preserving scheme whose threshold is an exact order statistic,
//! a scheme with a space-time forcing term, and a multiphase grain-growth
//! scheme with a vapor phase and a total-volume constraint. Alongside them
//! the [`diagnostics`] module evaluates the approximate energies,
//! dissipations, first variations and per-step energy-dissipation
//! inequalities that certify each step as a discrete minimizing movement,
//! and [`oracles`] holds sharp-interface reference solutions.

pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod kernel;
pub mod oracles;
pub mod schemes;
pub mod threshold;

pub use error::{Error, Result};
pub use grid::{Grid, MultiPhaseState, PhaseField, RealField};
pub use kernel::HeatKernelPlan;
