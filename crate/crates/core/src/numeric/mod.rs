//! Dense arrays, reverse-mode differentiation, optimizers and a
//! finite-difference gradient oracle.

mod array;
mod finite_diff;
mod graph;
mod optim;
mod params;

pub use array::Array;
pub use finite_diff::finite_diff_grad;
pub use graph::{matmul_raw, Gradients, Graph, Var, GATHER_ZERO};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Bound, ParamId, ParamStore};
