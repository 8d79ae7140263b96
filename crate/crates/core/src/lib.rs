//! Space-time U-Net video diffusion at desk scale.
//!
//! The crate covers the whole toolkit: a small reverse-mode autodiff tensor
//! library ([`numerics`]), a toy image U-Net and its inflation into a
//! space-time U-Net ([`stunet`]), the diffusion objective and samplers
//! ([`diffusion`]), temporal MultiDiffusion for windowed super-resolution
//! ([`multidiffusion`]), mask conditioning and weight interpolation
//! ([`applications`]) and a controlled temporal-aliasing lab
//! ([`cascade_lab`]).

pub mod applications;
pub mod cascade_lab;
pub mod diffusion;
pub mod error;
pub mod multidiffusion;
pub mod numerics;
pub mod rng;
pub mod stunet;
pub mod train;

pub use error::{Error, Result};
pub use numerics::Tensor;
