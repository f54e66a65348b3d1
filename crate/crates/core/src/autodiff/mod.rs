//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! execution order; [`Tape::backward`] walks the records in exact reverse and
//! accumulates gradients into every node that depends on a
//! gradient-requiring leaf. Gradients accumulate across calls; zeroing them is
//! the caller's job (a fresh tape per step does it implicitly).
//!
//! Everything is generic over [`Real`]: training and inference run in `f32`,
//! gradient checks in `f64`.

mod gradcheck;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

pub use gradcheck::{grad_check, numeric_gradient, relative_error};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub trait Real:
    Float + FromPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
