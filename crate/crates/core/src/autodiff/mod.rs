//! Minimal reverse-mode automatic differentiation with a gradient-reversal
//! primitive, sufficient for a small causal transformer, its two heads, and
//! the domain-adversarial objective.

mod gradcheck;
pub mod math;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, FiniteDiffReport, ScalarFn};
pub use tape::{CeNorm, Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
