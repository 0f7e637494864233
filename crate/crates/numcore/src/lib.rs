//! Minimal dense tensors with reverse-mode autodiff.
//!
//! Scope is what a small convolutional actor-critic needs: valid 2-D
//! convolution, affine layers, rectifiers, segment-wise masked log-softmax,
//! elementwise arithmetic and reductions, plus Adam, orthogonal
//! initialisation, global gradient-norm clipping and a flat checkpoint format.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod optim;
mod scalar;
mod tensor;

pub use error::NumError;
pub use graph::{Gradients, Graph, Segments, Var, MASKED_LOGIT};
pub use init::orthogonal_init;
pub use optim::{adam_step, global_grad_clip, global_norm, AdamConfig, AdamState};
pub use scalar::Scalar;
pub use tensor::Tensor;
