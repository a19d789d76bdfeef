//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Everything model-shaped in this crate (probability sources, the SNTP
//! encoder, the text encoder, all losses) is built from the ops in
//! [`graph`]. Training runs in `f32`; the gradient-check suite instantiates
//! the same code with `f64` so algorithmic errors are separated from
//! rounding noise.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod param;

pub use graph::{Graph, Tensor};
pub use optim::{AdamW, LrSchedule};
pub use param::{ParamId, ParamStore};

use std::fmt::{Debug, Display};

/// Element type for tensors: `f32` in training, `f64` in checking mode.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE_TAG: u8;
}

impl Scalar for f32 {
    const DTYPE_TAG: u8 = 0;
}
impl Scalar for f64 {
    const DTYPE_TAG: u8 = 1;
}

/// Shorthand for casting an `f64` literal into the active element type.
#[inline]
pub fn sc<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 -> scalar cast")
}

/// Number of elements implied by a shape.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
