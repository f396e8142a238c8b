//! Minimal dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Everything is 64-bit floating point and single-threaded: the tape
//! ([`Graph`]) is built eagerly during the forward pass and walked in reverse
//! by [`Graph::backward`]. Gradients accumulate into the leaf tensors'
//! gradient buffers until explicitly cleared, so repeated backward passes
//! after a reset are bit-identical.

mod adam;
mod blob;
mod gradcheck;
mod graph;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamParams, AdamState};
pub use blob::{
    read_container, read_tensor_blob, tensor_blob_bytes, write_container, ContainerFile,
};
pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId};
pub use rng::{derive_seed, SeedRng};
pub use tensor::Tensor;
