//! Command-line pipelines: dataset generation, training, sampling and the
//! aliasing lab, with the file formats they read and write.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod media;
pub mod training;

pub use error::{CliError, Result};
