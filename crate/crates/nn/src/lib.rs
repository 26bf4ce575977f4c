//! Dense tensors, a tape-based reverse-mode autodiff graph, common layers
//! and the Adam optimiser.
//!
//! Everything computes in `f64`. Sequences are time-major (`[T, C]`, one
//! frame per row); several sequences are packed row-wise and described by a
//! [`Segments`] layout so convolutions, attention and pooling never mix
//! frames across sequence boundaries.

mod adam;
mod error;
mod gemm;
pub mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod segments;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use error::{NnError, Result};
pub use graph::{softmax_in_place, AttnLayout, BackwardOp, Gradients, Graph, Var};
pub use layers::Mode;
pub use params::{Param, ParamStore};
pub use segments::Segments;
pub use tensor::Tensor;
