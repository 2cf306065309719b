//! Deep-equilibrium hyperspectral unmixing.
//!
//! An observed hyperspectral cube `Y` (`h x w` pixels, `L` bands) is modeled
//! as `Y ≈ A ×₃ W`: per-pixel abundance vectors on the probability simplex
//! mixed through an endmember matrix `W`. The abundance estimate is defined
//! implicitly as the fixed point of a learned proximal-gradient update and
//! trained by differentiating through that fixed point at constant memory.
//!
//! Module map:
//! - [`tensor`]: dense tensors, deterministic RNG, least squares, eigen.
//! - [`autodiff`]: differentiable primitives with hand-derived VJPs.
//! - [`classical`]: VCA endmember extraction and FCLS abundance baselines.
//! - [`equilibrium`]: the fixed-point abundance layer and its solvers.
//! - [`backward`]: losses and the Neumann-series implicit adjoint.
//! - [`train`]: optimizer, memory accounting, DEQ and unrolled training.
//! - [`data`]: synthetic scenes, metrics, and on-disk formats.

pub mod autodiff;
pub mod backward;
pub mod classical;
pub mod equilibrium;
pub mod error;
pub mod ledger;
pub mod tensor;
pub mod train;

pub use error::{Result, UnmixError};
