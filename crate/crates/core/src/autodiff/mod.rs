//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport, ABS_FLOOR};
pub use graph::{Axis, Graph, Var};
