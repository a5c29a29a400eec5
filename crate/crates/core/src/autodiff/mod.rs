//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_report, op_suite, rel_err, FdReport, GradCase, FD_STEP, REL_ERR_FLOOR};
pub use graph::{sigmoid, Activation, EwiseOp, Graph, Operand, ReduceKind, Var, SIGMOID_CLAMP};
pub use optim::{Adam, Bound, ParamId, ParamSet};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
