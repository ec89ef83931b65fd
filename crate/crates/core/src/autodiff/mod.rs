//! Dense `f64` tensors with a small, closed set of differentiable ops.
//!
//! Layers elsewhere in the crate are composed only from the ops on
//! [`Var`], so finite-difference coverage of these ops covers the model.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use tape::{Gradients, Tape, Var, CHECK_FINITE_ENV};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;
