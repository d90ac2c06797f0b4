//! Dense `f64` tensors, a reverse-mode tape, and transformer layers.

pub mod functional;
mod gradcheck;
pub mod layers;
mod tape;
mod tensor;

pub use functional::{entropy, sinusoidal_position_encoding, softmax_with_temperature};
pub use gradcheck::gradient_check;
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{ParameterSet, Tensor};

pub(crate) use tape::sigmoid;

#[cfg(test)]
mod tests;
