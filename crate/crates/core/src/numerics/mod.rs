//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The graph is define-by-run: every training step builds a fresh [`Graph`],
//! runs forward ops on it, calls [`Graph::backward`] once, and flushes leaf
//! gradients back into a persistent [`ParameterStore`]. All arithmetic is in
//! 64-bit floats so gradient checks can be tight.

mod adam;
mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod store;
mod tensor;


pub use adam::Adam;
pub use checkpoint::{load_into_store, read_tensors, write_store, write_tensors, FORMAT_VERSION};
pub use error::NumericsError;
pub use gradcheck::{finite_difference_grad, relative_error, BlockCheck};
pub use graph::{Graph, NodeId};
pub use store::{ParamId, Parameter, ParameterStore};
pub use tensor::Tensor;
