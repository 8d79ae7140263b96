//! Dense tensors with reverse-mode differentiation.
//!
//! Video activations use the axis order `(T, C, H, W)`; image batches use
//! `(N, C, H, W)`. Padding is always zero and there is no broadcasting
//! beyond scalar scaling and the channel-bias add.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Resample, Tape, Var};
pub use tensor::Tensor;
