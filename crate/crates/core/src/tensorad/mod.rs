//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`]; every kernel appends a node holding its
//! forward value and what it needs for the backward rule. Leaves created
//! from a tensor with `requires_grad` are tracked, everything downstream of a
//! tracked node is tracked, and [`Tape::backward`] only materialises
//! gradients for tracked nodes.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use param::{Parameter, ParameterSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sq_dist_rows;
