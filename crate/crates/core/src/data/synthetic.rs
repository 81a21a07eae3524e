use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

/// Class-separable RGB images: each class owns a fixed random mixture of
/// oriented gratings with its own color tint; every sample adds Gaussian noise
/// and a small global brightness offset.
pub fn make_synthetic(num_classes: usize, per_class: usize, side: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    if num_classes == 0 || per_class == 0 || side == 0 {
        return Err(Error::Config("make_synthetic arguments must be positive".into()));
    }
    let plane = side * side;
    let patterns: Vec<Vec<f32>> = (0..num_classes)
        .map(|c| {
            let mut r = rng::stream(seed, &[tag::SYNTHETIC, 0, c as u64]);
            let tint: [f32; 3] = core::array::from_fn(|_| r.random_range(0.3..1.0));
            let waves: Vec<(f32, f32, f32, f32)> = (0..3)
                .map(|_| {
                    (
                        r.random_range(0.0..core::f32::consts::PI),
                        r.random_range(1.0..4.0),
                        r.random_range(0.0..core::f32::consts::TAU),
                        r.random_range(0.1..0.25),
                    )
                })
                .collect();
            let mut px = Vec::with_capacity(3 * plane);
            for &t in &tint {
                for y in 0..side {
                    for x in 0..side {
                        let (u, v) = (x as f32 / side as f32, y as f32 / side as f32);
                        let s: f32 = waves
                            .iter()
                            .map(|&(theta, freq, phase, amp)| {
                                amp * Float::sin(core::f32::consts::TAU * freq * (u * Float::cos(theta) + v * Float::sin(theta)) + phase)
                            })
                            .sum();
                        px.push(t * (0.5 + s));
                    }
                }
            }
            px
        })
        .collect();
    let noise = Normal::new(0.0f32, 0.08).expect("positive std");
    let mut out = Vec::with_capacity(num_classes * per_class);
    for i in 0..per_class {
        for (c, pattern) in patterns.iter().enumerate() {
            let mut r = rng::stream(seed, &[tag::SYNTHETIC, 1, c as u64, i as u64]);
            let offset = r.random_range(-0.08f32..0.08);
            let data = pattern.iter().map(|&p| (p + offset + noise.sample(&mut r)).clamp(0.0, 1.0)).collect();
            out.push(LabeledImage::new(Tensor::new(&[3, side, side], data)?, c)?);
        }
    }
    Ok(out)
}
