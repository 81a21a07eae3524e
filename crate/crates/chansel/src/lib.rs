//! Files, datasets and the command-line driver around `chansel-core`.
//!
//! - [`cifar`]: CIFAR-10/100 binary batch reader and writer.
//! - [`checkpoint`]: the versioned model container.
//! - [`config`]: `key = value` run configuration with overrides.
//! - [`fit`]: training with CSV logging and checkpoints.
//! - [`eval`]: 1-NN accuracy, sparse execution and report types.

pub mod checkpoint;
pub mod cifar;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fit;

pub use error::{Error, Result};
