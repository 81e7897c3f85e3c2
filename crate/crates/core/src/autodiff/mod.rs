//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.

mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use ops::Mask;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
