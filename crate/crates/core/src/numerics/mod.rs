//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{cross_entropy_value, grad, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

