//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! Every backward rule is itself written in terms of [`Var`] operations, so a
//! gradient computed with [`Var::backward_create_graph`] can be differentiated
//! again. Gradient-penalty critics need exactly that.
//!
//! Image tensors use a channel-major `[C, B, H, W]` layout so that a
//! convolution is a single `unfold -> matmul` without transposes.

pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod optim;
mod var;

pub use conv::ConvGeom;
pub use layers::{Bound, ParamStore, Weights};
pub use optim::Adam;
pub use var::{is_grad_enabled, no_grad, Gradients, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Scalar types the engine can run on. Training uses `f32`; gradient checks
/// use `f64`.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Float for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
