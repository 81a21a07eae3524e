//! Low-level numeric kernels shared by the autodiff graph and the sparse
//! inference engine. Both paths call the same routines so that a sparse run
//! with every channel active reproduces the dense run bit for bit.

use crate::real::Real;

/// Spatial output size of a convolution, if valid.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || size + 2 * padding < kernel {
        return None;
    }
    Some((size + 2 * padding - kernel) / stride + 1)
}

/// Geometry of a single 2-D cross-correlation over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        let h_out = conv_out_dim(h, kernel, stride, padding)?;
        let w_out = conv_out_dim(w, kernel, stride, padding)?;
        Some(Self { c_in, h, w, c_out, kernel, stride, padding, h_out, w_out })
    }

    /// Length of one im2col column (`c_in * k * k`).
    pub fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }

    /// True when the input can serve directly as its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Multiply-accumulates for one sample.
    pub fn macs(&self) -> u64 {
        (self.patch() * self.c_out * self.out_plane()) as u64
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - padding` lies
/// inside `0..w`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.padding);
    let lo = if p > kx { (p - kx).div_ceil(s) } else { 0 };
    let hi = if g.w + p > kx { ((g.w + p - kx - 1) / s + 1).min(g.w_out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `[c_in, h, w]` sample into a `[c_in*k*k, h_out*w_out]` matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_plane();
    debug_assert_eq!(cols.len(), g.patch() * plane);
    for c in 0..g.c_in {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let start = lo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&srow[start..start + hi - lo]);
                    } else {
                        for (d, &v) in line[lo..hi].iter_mut().zip(srow[start..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kx - g.padding;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    for (d, &v) in drow[start..].iter_mut().step_by(g.stride).zip(srow) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `c (m x n) = a (m x k) * b (k x n)`, all row-major and contiguous.
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds asserted above; `c` is a distinct mutable slice.
    unsafe {
        T::gemm(
            m, k, n, T::one(),
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (m x n) = a (m x k) * b^T` where `b` is stored `n x k`.
pub fn matmul_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds asserted above; the transposed view of `b` uses swapped strides.
    unsafe {
        T::gemm(
            m, k, n, T::one(),
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (m x n) = a^T * b` where `a` is stored `k x m` and `b` is `k x n`.
pub fn matmul_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds asserted above; the transposed view of `a` uses swapped strides.
    unsafe {
        T::gemm(
            m, k, n, T::one(),
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Convolves one sample: `out [c_out, h_out*w_out] = weight [c_out, patch] * cols`.
///
/// `cols` is scratch space of `patch * out_plane` values, unused for pointwise
/// convolutions.
pub fn conv_sample<T: Real>(x: &[T], weight: &[T], g: &ConvGeom, out: &mut [T], cols: &mut [T]) {
    let n = g.out_plane();
    if g.is_pointwise() {
        matmul(g.c_out, g.c_in, n, weight, x, out, false);
    } else {
        im2col(x, g, cols);
        matmul(g.c_out, g.patch(), n, weight, cols, out, false);
    }
}

/// Per-channel `(scale, shift)` so that eval-mode batch norm is `x * scale + shift`.
pub fn bn_eval_affine<T: Real>(mean: T, var: T, gamma: T, beta: T, eps: T) -> (T, T) {
    let inv_std = T::one() / (var + eps).sqrt();
    let scale = gamma * inv_std;
    (scale, beta - mean * scale)
}

/// Mean of each `plane`-sized run of `x`.
pub fn plane_means<T: Real>(x: &[T], plane: usize, out: &mut [T]) {
    let inv = T::one() / T::lit(plane as f64);
    for (o, chunk) in out.iter_mut().zip(x.chunks_exact(plane)) {
        *o = chunk.iter().copied().sum::<T>() * inv;
    }
}
