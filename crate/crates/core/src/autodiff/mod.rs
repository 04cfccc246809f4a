//! Reverse-mode differentiation over a closed set of primitives.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport, LeafReport};
pub use kernels::{AffineForm, Precision};
pub use tape::{Gradients, Op, ParamSet, Tape, Var};
pub use tensor::Tensor;
