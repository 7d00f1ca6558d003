//! Minimal matrix autodiff used by the fusion model and its objectives.

mod graph;
mod mat;
mod params;

pub use graph::{log_softmax_rows, sigmoid, softmax_rows, softplus, Gradients, Graph, Var};
pub use mat::Mat;
pub use params::{Binder, ParamStore};
