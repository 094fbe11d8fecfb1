//! Small tape-based reverse-mode differentiation engine.
//!
//! Build a [`Graph`], register parameters with [`Graph::param`], compose ops,
//! then call [`Graph::backward`] on a scalar node.

mod check;
mod graph;
mod tensor;

pub use check::{
    finite_difference_check, op_gradient_suite, FdEntry, FdReport, FdStatus, ABS_FLOOR,
};
#[doc(hidden)]
pub use check::{finite_difference_check_with, op_gradient_suite_with};
pub use graph::{Axis, Gradients, Graph, InjectedFault, Var};
pub use tensor::Tensor;
