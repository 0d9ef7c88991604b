//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Values are recorded on a [`Tape`] through [`Var`] handles; calling
//! [`Tape::backward`] on a scalar loss yields [`Gradients`] for every leaf
//! that requires them. Everything is generic over [`Scalar`] (`f32` for
//! training, `f64` for gradient checks).

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use ops::Padding;
pub use scalar::{Precision, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
