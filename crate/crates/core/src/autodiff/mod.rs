//! Reverse-mode automatic differentiation over dense `(N, C, D, H, W)` tensors.
//!
//! A [`Graph`] records every operation in evaluation order together with the
//! activations its backward rule needs. [`Graph::backward`] walks the record
//! in reverse and accumulates gradients into every node that depends on a
//! [`Graph::variable`] leaf. The graph is generic over the element type so the
//! same model code runs in `f32` for training and in `f64` for gradient checks.

mod adam;
mod gradcheck;
mod graph;
pub mod kernels;
mod loss;

pub use adam::AdamState;
pub use gradcheck::{finite_diff_check, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{BackwardFn, Graph, Var};
pub use loss::DICE_SMOOTH;
