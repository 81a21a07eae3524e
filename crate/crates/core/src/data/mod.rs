//! Anchor images, stochastic two-view augmentation and synthetic data.

mod augment;
mod synthetic;

use alloc::format;
use alloc::vec::Vec;

pub use augment::{augment, two_views, AugmentationConfig};
pub use synthetic::make_synthetic;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `[3, S, S]` image with values in `[0, 1]` and its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor<f32>,
    pub label: usize,
}

impl LabeledImage {
    pub fn new(pixels: Tensor<f32>, label: usize) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Shape { op: "LabeledImage", detail: format!("expected [C, S, S], got {s:?}") });
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels, label })
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }
}

/// Stacks `[C, S, S]` tensors into `[B, C, S, S]`.
pub fn stack_images(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or(Error::Empty("image batch"))?;
    let mut shape = Vec::with_capacity(4);
    shape.push(images.len());
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.len());
    for im in images {
        im.require_shape("stack_images", first.shape())?;
        data.extend_from_slice(im.data());
    }
    Tensor::new(&shape, data)
}

/// Pixels of a set of labeled images as one batch tensor.
pub fn batch_of(images: &[&LabeledImage]) -> Result<Tensor<f32>> {
    let px: Vec<Tensor<f32>> = images.iter().map(|im| im.pixels.clone()).collect();
    stack_images(&px)
}
