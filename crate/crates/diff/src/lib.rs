//! Reverse-mode differentiation on a flat tape, plus the small set of neural
//! network primitives the particle pipeline is built from: dense layers,
//! same-padded 2D convolutions, pooling, layer norm, activations, Adam, and a
//! binary checkpoint format.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and `f64` for finite-difference gradient checks.

mod adam;
pub mod check;
pub mod checkpoint;
mod conv;
mod error;
mod graph;
mod mlp;
mod params;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{DiffError, Result};
pub use graph::{CustomOp, GradTable, Graph, Var};
pub use mlp::{forward_mlp, init_mlp, Activation, MlpSpec};
pub use params::{Gradients, ParameterStore};
pub use scalar::Real;
pub use tensor::Tensor;
