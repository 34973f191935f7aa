//! Minimal reverse-mode automatic differentiation over 2-D `f64` arrays,
//! plus the handful of layers the model is assembled from.

mod graph;
pub mod nn;
mod params;

pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
