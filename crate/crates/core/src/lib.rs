//! From-scratch building blocks for a multi-grained spatio-temporal sequence
//! classifier: a dense tensor type with the usual convolution/pooling
//! primitives, tape-based reverse-mode differentiation, the two-branch
//! fusion network with an attention-augmented bidirectional ConvLSTM
//! back-end, a deterministic synthetic video-word corpus, and an Adam
//! training loop with checkpointing.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ConvSpec, Tensor};

/// Default storage scalar of the runtime (training, CLI, file formats).
pub type Real = f32;
pub mod gradcheck;
