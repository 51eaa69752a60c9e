//! Dense `f64` tensors and reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{analytic_gradient, grad_check, max_relative_error, numeric_gradient, RELATIVE_ERROR_FLOOR};
pub use tape::{sigmoid, softplus, CustomOp, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_into;

/// Softmax of a plain vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    out
}
