//! Monocular food-energy estimation: voxel shape reconstruction, density
//! regression and volume refinement, plus the synthetic data and metrics used
//! to check them.

pub mod adaptation;
pub mod dataset;
pub mod depth;
pub mod error;
pub mod eval;
pub mod gan;
mod nn;
pub mod pipeline;
pub mod pnm;
pub mod regressor;
pub mod voxel;

pub use error::{Error, Result};
pub use voxcal_autodiff::Tensor;
