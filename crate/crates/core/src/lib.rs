//! Budgeted dynamic channel selection for self-supervised convolutional
//! encoders.
//!
//! The crate is `no_std` (with `alloc`) and contains every numeric piece of the
//! pipeline:
//!
//! - [`graph`]: a closed-op-set reverse-mode autodiff tape over dense tensors.
//! - [`data`]: anchor images, the two-view augmentation pipeline and a
//!   class-separable synthetic dataset.
//! - [`backbone`]: a small residual encoder whose basic blocks carry an
//!   SE-style channel gate (binary-concrete relaxation while training, hard
//!   threshold at inference).
//! - [`flops`]: dense and dynamic MAC accounting and the budget regularizer.
//! - [`simsiam`]: projector, predictor and the symmetric stop-gradient loss.
//! - [`trainer`]: SGD with momentum, warmup + cosine schedule, one training step.
//! - [`sparse`]: an inference engine that skips gated-off channels for real.
//! - [`eval`]: 1-NN accuracy and channel usage statistics.
//!
//! File formats, dataset ingestion and the CLI live in the `chansel` crate.
#![no_std]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod params;
pub mod real;
pub mod rng;
pub mod simsiam;
pub mod sparse;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use real::Real;
pub use tensor::Tensor;
