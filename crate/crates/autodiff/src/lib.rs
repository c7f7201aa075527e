//! Minimal deterministic reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive applications over dense [`Tensor`]s and
//! replays them backwards to produce [`Gradients`]. Learnable weights live in
//! [`ParamSet`]s, are bound onto a fresh tape for each forward pass, and are
//! updated with [`optimizer_step`] (Adam). Weights persist through the
//! `VOXCAL01` checkpoint format in [`checkpoint`].

pub mod checkpoint;
mod conv;
mod error;
mod gradcheck;
mod optim;
mod params;
mod primitive;
mod scalar;
mod tape;
mod tensor;

pub use conv::ConvGeom;
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_many, grad_check_sampled};
pub use optim::{optimizer_step, AdamConfig, OptimizerState};
pub use params::{init_tensor, Bound, Init, ParamGrads, ParamSet};
pub use primitive::{Attr, Attrs, Primitive};
pub use scalar::Scalar;
pub use tape::{Gradients, Record, Tape, Var};
pub use tensor::Tensor;
