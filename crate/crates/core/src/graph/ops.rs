use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, Mode, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running batch-norm statistics, updated by train-mode forwards.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_err(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked by caller")
}

/// `(batch, channels, elements per channel per sample)` for rank-2 or rank-4 input.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [b, c] => Some((b, c, 1)),
        [b, c, h, w] => Some((b, c, h * w)),
        _ => None,
    }
}

impl<T: Real> Graph<T> {
    /// Cross-correlation of `x: [B, C_in, H, W]` with `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (&[b, c_in, h, wd], &[c_out, wc, k, k2]) = (xs, ws) else {
            return Err(shape_err("conv2d", format!("input {xs:?}, weight {ws:?}")));
        };
        if wc != c_in || k != k2 || k % 2 == 0 {
            return Err(shape_err("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        let g = ConvGeom::new(c_in, h, wd, c_out, k, stride, padding).ok_or_else(|| {
            shape_err("conv2d", format!("empty output for input {xs:?}, k={k}, stride={stride}, padding={padding}"))
        })?;
        let (in_len, out_len) = (c_in * h * wd, c_out * g.out_plane());
        let mut out = vec![T::zero(); b * out_len];
        let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { g.patch() * g.out_plane() }];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            for (xs, os) in xd.chunks_exact(in_len).zip(out.chunks_exact_mut(out_len)) {
                kernels::conv_sample(xs, wd, &g, os, &mut cols);
            }
        }
        let value = Tensor::new(&[b, c_out, g.h_out, g.w_out], out)?;
        self.push(value, Op::Conv2d { x, w, stride, padding }, &[x, w])
    }

    /// Batch normalization over the channel axis of `[B, C]` or `[B, C, H, W]`.
    ///
    /// Train mode normalizes with biased batch statistics and folds them into
    /// `stats` (unbiased variance) with momentum 0.1; eval mode uses `stats`.
    /// `gamma`/`beta` may be omitted for a non-affine normalization.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (b, c, inner) = channel_layout(&shape)
            .ok_or_else(|| shape_err("batchnorm", format!("unsupported rank {shape:?}")))?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [c] {
                return Err(shape_err("batchnorm", format!("parameter {:?} for {c} channels", self.shape(p))));
            }
        }
        if stats.channels() != c {
            return Err(shape_err("batchnorm", format!("running stats for {} channels, input has {c}", stats.channels())));
        }
        let eps = T::lit(BN_EPS);
        let count = b * inner;
        let gamma_v: Vec<T> = gamma.map_or_else(|| vec![T::one(); c], |v| self.value(v).data().to_vec());
        let beta_v: Vec<T> = beta.map_or_else(|| vec![T::zero(); c], |v| self.value(v).data().to_vec());
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        let (mean, inv_std, train) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::BatchTooSmall { per_channel: count });
                }
                let n = T::lit(count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for (j, row) in xd.chunks_exact(inner).enumerate() {
                    let m = &mut mean[j % c];
                    row.iter().for_each(|v| *m += *v);
                }
                mean.iter_mut().for_each(|m| *m /= n);
                for (j, row) in xd.chunks_exact(inner).enumerate() {
                    let (mu, s) = (mean[j % c], &mut var[j % c]);
                    row.iter().for_each(|v| *s += (*v - mu) * (*v - mu));
                }
                var.iter_mut().for_each(|s| *s /= n);
                let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
                for (j, (orow, row)) in out.chunks_exact_mut(inner).zip(xd.chunks_exact(inner)).enumerate() {
                    let ch = j % c;
                    let (g, mu, is, be) = (gamma_v[ch], mean[ch], inv_std[ch], beta_v[ch]);
                    orow.iter_mut().zip(row).for_each(|(o, v)| *o = g * ((*v - mu) * is) + be);
                }
                let m = T::lit(BN_MOMENTUM);
                let unbias = n / (n - T::one());
                for ch in 0..c {
                    stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * mean[ch];
                    stats.var[ch] = (T::one() - m) * stats.var[ch] + m * var[ch] * unbias;
                }
                (mean, inv_std, true)
            }
            Mode::Eval => {
                let affine: Vec<(T, T)> = (0..c)
                    .map(|ch| kernels::bn_eval_affine(stats.mean[ch], stats.var[ch], gamma_v[ch], beta_v[ch], eps))
                    .collect();
                for (j, (orow, row)) in out.chunks_exact_mut(inner).zip(xd.chunks_exact(inner)).enumerate() {
                    let (scale, shift) = affine[j % c];
                    orow.iter_mut().zip(row).for_each(|(o, v)| *o = *v * scale + shift);
                }
                let inv_std = stats.var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
                (stats.mean.clone(), inv_std, false)
            }
        };
        let value = Tensor::new(&shape, out)?;
        let inputs: Vec<Var> = [Some(x), gamma, beta].into_iter().flatten().collect();
        self.push(value, Op::BatchNorm { x, gamma, beta, mean, inv_std, train }, &inputs)
    }

    /// `x: [B, n]`, `w: [m, n]`, optional `b: [m]` → `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (&[rows, n], &[m, wn]) = (xs, ws) else {
            return Err(shape_err("linear", format!("input {xs:?}, weight {ws:?}")));
        };
        if n != wn || b.is_some_and(|b| self.shape(b) != [m]) {
            return Err(shape_err("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let mut out = vec![T::zero(); rows * m];
        kernels::matmul_nt(rows, n, m, self.value(x).data(), self.value(w).data(), &mut out, false);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(m) {
                row.iter_mut().zip(bd).for_each(|(o, b)| *o += *b);
            }
        }
        let value = Tensor::new(&[rows, m], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Linear { x, w, b }, &inputs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    /// Global average pooling `[B, C, H, W]` → `[B, C]`.
    pub fn gap2d(&mut self, x: Var) -> Result<Var> {
        let &[b, c, h, w] = self.shape(x) else {
            return Err(shape_err("gap2d", format!("expected rank 4, got {:?}", self.shape(x))));
        };
        let mut out = vec![T::zero(); b * c];
        kernels::plane_means(self.value(x).data(), h * w, &mut out);
        let value = Tensor::new(&[b, c], out)?;
        self.push(value, Op::Gap2d { x }, &[x])
    }

    /// Scales each row of `[B, d]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let &[_, d] = self.shape(x) else {
            return Err(shape_err("l2_normalize", format!("expected rank 2, got {:?}", self.shape(x))));
        };
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(xd.len() / d);
        let mut out = Vec::with_capacity(xd.len());
        for (row_idx, row) in xd.chunks_exact(d).enumerate() {
            let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if norm <= T::zero() {
                return Err(Error::Degenerate { op: "l2_normalize", row: row_idx });
            }
            out.extend(row.iter().map(|v| *v / norm));
            norms.push(norm);
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.push(value, Op::L2Normalize { x, norms }, &[x])
    }

    /// Identity forward; the output never propagates gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul { a, b }, &[a, b])
    }

    /// `x: [B, C, H, W]` times `mask: [B, C]` broadcast over the spatial axes.
    pub fn channel_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        let &[b, c, h, w] = self.shape(x) else {
            return Err(shape_err("channel_mask", format!("input {:?}", self.shape(x))));
        };
        if self.shape(mask) != [b, c] {
            return Err(shape_err("channel_mask", format!("mask {:?} for input {:?}", self.shape(mask), self.shape(x))));
        }
        let plane = h * w;
        let md = self.value(mask).data();
        let mut out = self.value(x).data().to_vec();
        for (chunk, &m) in out.chunks_exact_mut(plane).zip(md) {
            chunk.iter_mut().for_each(|v| *v = *v * m);
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        self.push(value, Op::ChannelMask { x, mask }, &[x, mask])
    }

    /// Forward value `hard`, backward gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<T>) -> Result<Var> {
        hard.require_shape("straight_through", self.shape(soft))?;
        self.push(hard, Op::StraightThrough { soft }, &[soft])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// Adds a scalar to every element.
    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::Shift { x }, &[x])
    }

    /// Adds a constant (non-differentiable) tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        c.require_shape("add_const", self.shape(x))?;
        let value = zip_map(self.value(x), c, |a, b| a + b);
        self.push(value, Op::Shift { x }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square { x }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.abs());
        self.push(value, Op::Abs { x }, &[x])
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// `(1/B) * sum_i <a_i, b_i>` over rows of two `[B, d]` tensors.
    pub fn rowdot_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "rowdot_mean", a, b)?;
        let &[rows, _] = self.shape(a) else {
            return Err(shape_err("rowdot_mean", format!("expected rank 2, got {:?}", self.shape(a))));
        };
        let dot: T = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).sum();
        let value = Tensor::scalar(dot / T::lit(rows as f64));
        self.push(value, Op::RowDotMean { a, b }, &[a, b])
    }

    /// Sum of several one-element tensors.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or(Error::Empty("add_all terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
