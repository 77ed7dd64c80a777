//! Dense tensors, a recording tape, and reverse-mode gradients.

mod gradcheck;
mod real;
mod tape;
mod value;

pub use gradcheck::{grad_check, GRAD_FLOOR};
pub use real::{gemm, MatLayout, Real};
pub use tape::{AttnDims, Gradients, Tape, TensorNode, Var};
pub use value::Tensor;

#[cfg(test)]
pub(crate) use tape::softmax_in_place;

#[cfg(test)]
mod tests;
