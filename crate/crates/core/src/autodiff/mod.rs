//! Reverse-mode automatic differentiation on dense f64 matrices.

mod mat;
mod params;
mod tape;

pub use mat::{Mat, SharedMat};
pub use params::{materialize, param_seed, InitRecord, InitScheme, ParamStore};
pub use tape::{Gradients, NodeId, Tape};
