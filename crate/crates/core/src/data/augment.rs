//! The augmentation set: random resized crop, color jitter, random grayscale,
//! Gaussian blur, horizontal flip. Applied in that order; output clamped to
//! `[0, 1]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    /// Fraction of the image area kept by the crop, `(min, max)` ⊆ `(0, 1]`.
    pub crop_scale: (f64, f64),
    /// Aspect-ratio range of the crop.
    pub crop_ratio: (f64, f64),
    /// Brightness, contrast, saturation, hue jitter strengths.
    pub jitter: [f64; 4],
    pub jitter_p: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub flip_p: f64,
    pub seed: u64,
}

impl AugmentationConfig {
    /// Standard small-image defaults; blur only above 32 pixels.
    pub fn for_side(side: usize) -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            jitter: [0.4, 0.4, 0.4, 0.1],
            jitter_p: 0.8,
            grayscale_p: 0.2,
            blur_p: if side <= 32 { 0.0 } else { 0.5 },
            blur_sigma: (0.1, 2.0),
            flip_p: 0.5,
            seed: 0,
        }
    }

    /// No-op pipeline: full-image crop, every probability zero.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            jitter: [0.0; 4],
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            blur_sigma: (0.1, 2.0),
            flip_p: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [("jitter_p", self.jitter_p), ("grayscale_p", self.grayscale_p), ("blur_p", self.blur_p), ("flip_p", self.flip_p)];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} must be in [0, 1], got {p}")));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("augment.crop_scale must satisfy 0 < min <= max <= 1, got ({lo}, {hi})")));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Config(format!("augment.crop_ratio invalid: ({rlo}, {rhi})")));
        }
        if self.jitter.iter().any(|&j| j < 0.0) || self.jitter[3] > 0.5 {
            return Err(Error::Config(format!("augment.jitter strengths invalid: {:?}", self.jitter)));
        }
        let (slo, shi) = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::Config(format!("augment.blur_sigma invalid: ({slo}, {shi})")));
        }
        Ok(())
    }
}

/// Two independently augmented views of the same anchor.
pub fn two_views(image: &LabeledImage, cfg: &AugmentationConfig, rng: &mut Rng) -> (Tensor<f32>, Tensor<f32>) {
    let a = augment(&image.pixels, cfg, rng);
    let b = augment(&image.pixels, cfg, rng);
    (a, b)
}

/// One draw from the augmentation pipeline.
pub fn augment(pixels: &Tensor<f32>, cfg: &AugmentationConfig, rng: &mut Rng) -> Tensor<f32> {
    let [c, h, w] = [pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]];
    let mut img = resized_crop(pixels.data(), c, h, w, cfg, rng);
    if c == 3 {
        if cfg.jitter_p > 0.0 && rng.random::<f64>() < cfg.jitter_p {
            color_jitter(&mut img, h * w, cfg.jitter, rng);
        }
        if cfg.grayscale_p > 0.0 && rng.random::<f64>() < cfg.grayscale_p {
            grayscale(&mut img, h * w);
        }
    }
    if cfg.blur_p > 0.0 && rng.random::<f64>() < cfg.blur_p {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        gaussian_blur(&mut img, h, w, sigma);
    }
    if cfg.flip_p > 0.0 && rng.random::<f64>() < cfg.flip_p {
        for row in img.chunks_exact_mut(w) {
            row.reverse();
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(&[c, h, w], img).expect("shape preserved")
}

/// Crop box `(top, left, height, width)` following the usual rejection scheme:
/// ten attempts at a random scale and log-uniform aspect ratio, then a center
/// crop clamped to the ratio range.
fn crop_box(h: usize, w: usize, cfg: &AugmentationConfig, rng: &mut Rng) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (rlo, rhi) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * sample(rng, cfg.crop_scale.0, cfg.crop_scale.1);
        let ratio = sample(rng, rlo, rhi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < cfg.crop_ratio.0 {
        ((w as f64 / cfg.crop_ratio.0).round() as usize, w)
    } else if in_ratio > cfg.crop_ratio.1 {
        (h, (h as f64 * cfg.crop_ratio.1).round() as usize)
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

fn sample(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Random crop resized back to `h x w` with bilinear interpolation
/// (half-pixel centers, edge clamping).
fn resized_crop(src: &[f32], c: usize, h: usize, w: usize, cfg: &AugmentationConfig, rng: &mut Rng) -> Vec<f32> {
    let (top, left, ch, cw) = crop_box(h, w, cfg, rng);
    let mut out = vec![0.0f32; c * h * w];
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    let taps = |dst: usize, scale: f64, len: usize| {
        let p = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (p.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (p - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..w).map(|x| taps(x, sx, cw)).collect();
    for y in 0..h {
        let (y0, y1, fy) = taps(y, sy, ch);
        for ch_i in 0..c {
            let plane = &src[ch_i * h * w..(ch_i + 1) * h * w];
            let r0 = &plane[(top + y0) * w + left..];
            let r1 = &plane[(top + y1) * w + left..];
            let dst = &mut out[(ch_i * h + y) * w..(ch_i * h + y + 1) * w];
            for (d, &(x0, x1, fx)) in dst.iter_mut().zip(&xs) {
                let a = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let b = r1[x0] + (r1[x1] - r1[x0]) * fx;
                *d = a + (b - a) * fy;
            }
        }
    }
    out
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn luma_plane(img: &[f32], plane: usize) -> Vec<f32> {
    (0..plane).map(|i| LUMA[0] * img[i] + LUMA[1] * img[plane + i] + LUMA[2] * img[2 * plane + i]).collect()
}

/// Replaces every channel with `0.299 R + 0.587 G + 0.114 B`.
pub(crate) fn grayscale(img: &mut [f32], plane: usize) {
    let l = luma_plane(img, plane);
    for ch in img.chunks_exact_mut(plane) {
        ch.copy_from_slice(&l);
    }
}

fn blend(img: &mut [f32], other: impl Fn(usize) -> f32, factor: f32) {
    for (i, v) in img.iter_mut().enumerate() {
        *v = (factor * *v + (1.0 - factor) * other(i)).clamp(0.0, 1.0);
    }
}

/// Brightness, contrast, saturation and hue adjustments in random order, each
/// with a factor drawn uniformly from its range.
fn color_jitter(img: &mut [f32], plane: usize, strength: [f64; 4], rng: &mut Rng) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        let s = strength[op];
        if s == 0.0 {
            continue;
        }
        match op {
            0 => {
                let f = rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32;
                blend(img, |_| 0.0, f);
            }
            1 => {
                let f = rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32;
                let l = luma_plane(img, plane);
                let mean = l.iter().sum::<f32>() / plane as f32;
                blend(img, |_| mean, f);
            }
            2 => {
                let f = rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32;
                let l = luma_plane(img, plane);
                blend(img, |i| l[i % plane], f);
            }
            _ => {
                let f = rng.random_range(-s..=s) as f32;
                shift_hue(img, plane, f);
            }
        }
    }
}

fn shift_hue(img: &mut [f32], plane: usize, shift: f32) {
    for i in 0..plane {
        let (r, g, b) = (img[i], img[plane + i], img[2 * plane + i]);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let h = wrap(h + shift, 1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        img[i] = r;
        img[plane + i] = g;
        img[2 * plane + i] = b;
    }
}

fn wrap(x: f32, m: f32) -> f32 {
    x - (x / m).floor() * m
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        wrap((g - b) / delta, 6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = Float::floor(h6);
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (sector as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Separable Gaussian blur with reflect padding; kernel size is the odd
/// number nearest to a tenth of the side, at least 3.
fn gaussian_blur(img: &mut [f32], h: usize, w: usize, sigma: f64) {
    let mut size = (h.min(w) / 10) | 1;
    if size < 3 {
        size = 3;
    }
    let half = (size / 2) as isize;
    let mut kernel: Vec<f32> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let norm: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if n == 1 {
            return 0;
        }
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let mut tmp = vec![0.0f32; h * w];
    for plane in img.chunks_exact_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * plane[y * w + reflect(x as isize + k as isize - half, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * tmp[reflect(y as isize + k as isize - half, h) * w + x])
                    .sum();
            }
        }
    }
}
