//! Minimal reverse-mode differentiable array engine.

mod adam;
pub mod checkpoint;
mod graph;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{broadcast_shape, Graph, Var, LAYER_NORM_EPS};
pub use params::{Bound, ParamId, ParamStore};

use ndarray::{ArrayD, IxDyn};

/// Convenience constructor for a dynamic-rank array.
pub fn array(shape: &[usize], values: Vec<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), values).expect("shape/value length mismatch")
}
