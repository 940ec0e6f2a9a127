//! Dense tensors with a define-by-run reverse-mode tape.
//!
//! Everything the model needs to train lives here: a row-major [`Tensor`],
//! a [`Tape`] that records differentiable operations as they execute, the
//! raw [`kernels`] shared by the tape and the streaming inference path, and
//! Adam with an inverse-square-root schedule in [`optim`].
//!
//! Training runs in `f32`; every operation is generic over [`Real`] so the
//! gradient checks can run the same code in `f64`.

pub mod kernels;
pub mod optim;
mod params;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub use optim::{adam_step, inverse_sqrt_lr, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Floating-point element type for tensors and the tape.
pub trait Real:
    num_traits::Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Additive score applied to masked-out attention entries.
pub const MASK_PENALTY: f64 = -1e9;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;
