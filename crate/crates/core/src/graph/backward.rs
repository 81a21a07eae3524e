use alloc::vec;
use alloc::vec::Vec;

use super::{Node, Op, Var};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;

/// Adjoint buffer of `v`, allocated on first touch; `None` when `v` does not
/// track gradients.
fn slot<'a, T: Real>(nodes: &[Node<T>], adjoints: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(adjoints[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn add_scaled<T: Real>(nodes: &[Node<T>], adjoints: &mut [Option<Vec<T>>], v: Var, dy: &[T], factor: T) {
    if let Some(g) = slot(nodes, adjoints, v) {
        g.iter_mut().zip(dy).for_each(|(g, d)| *g += *d * factor);
    }
}

pub(super) fn propagate<T: Real>(nodes: &[Node<T>], i: usize, dy: &[T], adj: &mut [Option<Vec<T>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf | Op::StopGradient => {}
        Op::Conv2d { x, w, stride, padding } => {
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            let &[_, c_in, h, wd] = xv.shape() else { unreachable!() };
            let &[c_out, _, k, _] = wv.shape() else { unreachable!() };
            let g = ConvGeom::new(c_in, h, wd, c_out, k, *stride, *padding).expect("validated in forward");
            let (in_len, out_len, plane, patch) = (c_in * h * wd, c_out * g.out_plane(), g.out_plane(), g.patch());
            let mut cols = vec![T::zero(); patch * plane];
            if let Some(dw) = slot(nodes, adj, *w) {
                for (xs, dys) in xv.data().chunks_exact(in_len).zip(dy.chunks_exact(out_len)) {
                    if g.is_pointwise() {
                        kernels::matmul_nt(c_out, plane, patch, dys, xs, dw, true);
                    } else {
                        kernels::im2col(xs, &g, &mut cols);
                        kernels::matmul_nt(c_out, plane, patch, dys, &cols, dw, true);
                    }
                }
            }
            if let Some(dx) = slot(nodes, adj, *x) {
                for (dxs, dys) in dx.chunks_exact_mut(in_len).zip(dy.chunks_exact(out_len)) {
                    if g.is_pointwise() {
                        kernels::matmul_tn(patch, c_out, plane, wv.data(), dys, dxs, true);
                    } else {
                        kernels::matmul_tn(patch, c_out, plane, wv.data(), dys, &mut cols, false);
                        kernels::col2im_add(&cols, &g, dxs);
                    }
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
            let xv = &nodes[x.0].value;
            let c = mean.len();
            let inner = match xv.shape() {
                [_, _, h, w] => h * w,
                _ => 1,
            };
            let n = T::lit((xv.len() / c) as f64);
            let gamma_v: Vec<T> = gamma.map_or_else(|| vec![T::one(); c], |g| nodes[g.0].value.data().to_vec());
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for (j, (drow, xrow)) in dy.chunks_exact(inner).zip(xv.data().chunks_exact(inner)).enumerate() {
                let ch = j % c;
                let (mu, is) = (mean[ch], inv_std[ch]);
                let (s, sx) = (&mut sum_dy[ch], &mut sum_dy_xhat[ch]);
                for (&d, &v) in drow.iter().zip(xrow) {
                    *s += d;
                    *sx += d * ((v - mu) * is);
                }
            }
            if let Some(g) = gamma {
                if let Some(dg) = slot(nodes, adj, *g) {
                    dg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, b)| *a += *b);
                }
            }
            if let Some(b) = beta {
                if let Some(db) = slot(nodes, adj, *b) {
                    db.iter_mut().zip(&sum_dy).for_each(|(a, b)| *a += *b);
                }
            }
            if let Some(dx) = slot(nodes, adj, *x) {
                let rows = dx.chunks_exact_mut(inner).zip(dy.chunks_exact(inner).zip(xv.data().chunks_exact(inner)));
                for (j, (dxrow, (drow, xrow))) in rows.enumerate() {
                    let ch = j % c;
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    let scale = gamma_v[ch] * is;
                    let (mdy, mdx) = (sum_dy[ch] / n, sum_dy_xhat[ch] / n);
                    for (dxv, (&d, &v)) in dxrow.iter_mut().zip(drow.iter().zip(xrow)) {
                        if *train {
                            *dxv += scale * (d - mdy - ((v - mu) * is) * mdx);
                        } else {
                            *dxv += scale * d;
                        }
                    }
                }
            }
        }
        Op::Linear { x, w, b } => {
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            let (&[rows, n], &[m, _]) = (xv.shape(), wv.shape()) else { unreachable!() };
            if let Some(dx) = slot(nodes, adj, *x) {
                kernels::matmul(rows, m, n, dy, wv.data(), dx, true);
            }
            if let Some(dw) = slot(nodes, adj, *w) {
                kernels::matmul_tn(m, rows, n, dy, xv.data(), dw, true);
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, adj, *b) {
                    for row in dy.chunks_exact(m) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                    }
                }
            }
        }
        Op::Relu { x } => {
            if let Some(dx) = slot(nodes, adj, *x) {
                for ((g, &d), &y) in dx.iter_mut().zip(dy).zip(out.data()) {
                    if y > T::zero() {
                        *g += d;
                    }
                }
            }
        }
        Op::Sigmoid { x } => {
            if let Some(dx) = slot(nodes, adj, *x) {
                for ((g, &d), &y) in dx.iter_mut().zip(dy).zip(out.data()) {
                    *g += d * y * (T::one() - y);
                }
            }
        }
        Op::Gap2d { x } => {
            let &[_, _, h, w] = nodes[x.0].value.shape() else { unreachable!() };
            let plane = h * w;
            let inv = T::one() / T::lit(plane as f64);
            if let Some(dx) = slot(nodes, adj, *x) {
                for (chunk, &d) in dx.chunks_exact_mut(plane).zip(dy) {
                    chunk.iter_mut().for_each(|g| *g += d * inv);
                }
            }
        }
        Op::L2Normalize { x, norms } => {
            let d = out.shape()[1];
            if let Some(dx) = slot(nodes, adj, *x) {
                for (((gx, dyr), yr), &norm) in dx
                    .chunks_exact_mut(d)
                    .zip(dy.chunks_exact(d))
                    .zip(out.data().chunks_exact(d))
                    .zip(norms)
                {
                    let proj: T = dyr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    for ((g, &dd), &y) in gx.iter_mut().zip(dyr).zip(yr) {
                        *g += (dd - y * proj) / norm;
                    }
                }
            }
        }
        Op::Add { a, b } => {
            add_scaled(nodes, adj, *a, dy, T::one());
            add_scaled(nodes, adj, *b, dy, T::one());
        }
        Op::Sub { a, b } => {
            add_scaled(nodes, adj, *a, dy, T::one());
            add_scaled(nodes, adj, *b, dy, -T::one());
        }
        Op::Mul { a, b } => {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(da) = slot(nodes, adj, *a) {
                da.iter_mut().zip(dy).zip(bv).for_each(|((g, &d), &y)| *g += d * y);
            }
            if let Some(db) = slot(nodes, adj, *b) {
                db.iter_mut().zip(dy).zip(av).for_each(|((g, &d), &y)| *g += d * y);
            }
        }
        Op::ChannelMask { x, mask } => {
            let xv = nodes[x.0].value.data();
            let md = nodes[mask.0].value.data();
            let plane = xv.len() / md.len();
            if let Some(dx) = slot(nodes, adj, *x) {
                for ((g, d), &m) in dx.chunks_exact_mut(plane).zip(dy.chunks_exact(plane)).zip(md) {
                    g.iter_mut().zip(d).for_each(|(g, &d)| *g += d * m);
                }
            }
            if let Some(dm) = slot(nodes, adj, *mask) {
                for ((g, d), xs) in dm.iter_mut().zip(dy.chunks_exact(plane)).zip(xv.chunks_exact(plane)) {
                    *g += d.iter().zip(xs).map(|(a, b)| *a * *b).sum::<T>();
                }
            }
        }
        Op::StraightThrough { soft } => add_scaled(nodes, adj, *soft, dy, T::one()),
        Op::Scale { x, factor } => add_scaled(nodes, adj, *x, dy, *factor),
        Op::Shift { x } => add_scaled(nodes, adj, *x, dy, T::one()),
        Op::Square { x } => {
            let xv = nodes[x.0].value.data();
            if let Some(dx) = slot(nodes, adj, *x) {
                dx.iter_mut().zip(dy).zip(xv).for_each(|((g, &d), &v)| *g += d * (v + v));
            }
        }
        Op::Abs { x } => {
            let xv = nodes[x.0].value.data();
            if let Some(dx) = slot(nodes, adj, *x) {
                for ((g, &d), &v) in dx.iter_mut().zip(dy).zip(xv) {
                    if v > T::zero() {
                        *g += d;
                    } else if v < T::zero() {
                        *g -= d;
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(dx) = slot(nodes, adj, *x) {
                dx.iter_mut().for_each(|g| *g += dy[0]);
            }
        }
        Op::RowDotMean { a, b } => {
            let rows = nodes[a.0].value.shape()[0];
            let f = dy[0] / T::lit(rows as f64);
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            add_scaled(nodes, adj, *a, bv, f);
            add_scaled(nodes, adj, *b, av, f);
        }
    }
}
