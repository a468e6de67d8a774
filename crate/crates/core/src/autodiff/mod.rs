//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Forward operations are recorded on a [`Graph`] as they run; a reverse
//! walk from a scalar loss yields [`Gradients`] that a [`ParamSet`] folds
//! into its accumulators.

mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, OpKind, Var};
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::Tensor;
