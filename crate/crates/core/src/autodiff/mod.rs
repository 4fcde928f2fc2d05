//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records primitives as they are evaluated. [`Tape::backward`]
//! accumulates gradients in reverse, [`Tape::grad_graph`] records that pass
//! on the tape for second derivatives, and [`Tape::deeplift_multipliers`]
//! swaps in the rescale rule for elementwise nonlinearities.

mod backward;
mod ops;
mod program;
mod tape;

pub use backward::{GradientSet, ReferenceContext, RESCALE_GUARD};
pub use ops::{gelu, gelu_grad, local_derivative, sigmoid, Op, LAYER_NORM_EPS};
pub use program::{finite_diff_grad, forward_record, gradients, relative_error, Program, Step};
pub use tape::{NodeId, Tape};
