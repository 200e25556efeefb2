//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The tape is rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`]; a [`Graph`] borrows it immutably, and the gradients from
//! [`Graph::backward`] are folded back with [`ParamStore::accumulate`].

mod graph;
mod gradcheck;
mod kernels;
mod mlp;
mod params;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Unary, Var, ENTROPY_EPS};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamDeviation};
pub use mlp::{init_layer, Activation, Mlp, MlpSpec};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::binary_entropy;
