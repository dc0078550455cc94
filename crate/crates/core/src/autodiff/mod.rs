//! Reverse-mode automatic differentiation.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{check_gradients, check_param_gradients, GradCheck};
pub use tape::{backprop_gradients, Gradients, Tape, Var};

#[cfg(test)]
mod tests;
