//! Inference that evaluates each gate first and then computes only the active
//! channels of the gated block: conv1 produces only active output channels and
//! conv2 reads only active input channels. MACs are counted from the matrix
//! products actually issued.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::kernels::{self, ConvGeom};
use crate::model::Model;
use crate::params::{BnLayout, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Execution record of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace<T> {
    pub embedding: Vec<T>,
    /// Indices of active channels per gated block, ascending.
    pub active: Vec<Vec<usize>>,
    /// Gated-block MACs performed (conv1 + conv2 + gate), per block.
    pub block_macs: Vec<u64>,
    /// Gate network share of `block_macs`.
    pub gate_macs: Vec<u64>,
    /// Stem and shortcut MACs.
    pub ungated_macs: u64,
}

impl<T: Real> SampleTrace<T> {
    /// `[C_out]` hard mask of block `l`.
    pub fn mask(&self, l: usize, c_out: usize) -> Vec<T> {
        let mut m = vec![T::zero(); c_out];
        for &c in &self.active[l] {
            m[c] = T::one();
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockExecStats {
    pub name: String,
    pub channels: usize,
    /// Active channel count per sample.
    pub active: Vec<usize>,
    /// Measured MACs per sample, gate included.
    pub macs: Vec<u64>,
    pub dense: u64,
    pub overhead: u64,
}

impl BlockExecStats {
    pub fn active_mean(&self) -> f64 {
        self.active.iter().sum::<usize>() as f64 / self.active.len().max(1) as f64
    }

    pub fn macs_mean(&self) -> f64 {
        self.macs.iter().sum::<u64>() as f64 / self.macs.len().max(1) as f64
    }

    /// Mean conv MACs (gate excluded) over dense MACs.
    pub fn ratio(&self) -> f64 {
        (self.macs_mean() - self.overhead as f64) / self.dense as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseExecStats {
    pub blocks: Vec<BlockExecStats>,
    pub ungated_macs: Vec<u64>,
}

impl SparseExecStats {
    pub fn samples(&self) -> usize {
        self.ungated_macs.len()
    }

    pub fn dense_total(&self) -> u64 {
        self.blocks.iter().map(|b| b.dense).sum()
    }

    pub fn overhead_total(&self) -> u64 {
        self.blocks.iter().map(|b| b.overhead).sum()
    }

    /// Measured gated MACs (gate included) of sample `i`.
    pub fn sample_macs(&self, i: usize) -> u64 {
        self.blocks.iter().map(|b| b.macs[i]).sum()
    }

    /// Per-sample conv-only ratio against the dense gated count.
    pub fn sample_ratio(&self, i: usize) -> f64 {
        (self.sample_macs(i) - self.overhead_total()) as f64 / self.dense_total() as f64
    }

    pub fn append(&mut self, other: SparseExecStats) {
        for (a, b) in self.blocks.iter_mut().zip(other.blocks) {
            a.active.extend(b.active);
            a.macs.extend(b.macs);
        }
        self.ungated_macs.extend(other.ungated_macs);
    }
}

pub struct SparseEngine<'m, T> {
    model: &'m Model<T>,
}

fn bn_apply<T: Real>(store: &ParamStore<T>, bn: &BnLayout, channel: usize, plane: &mut [T]) {
    let (scale, shift) = bn.eval_affine(store, channel);
    plane.iter_mut().for_each(|v| *v = *v * scale + shift);
}

fn relu<T: Real>(xs: &mut [T]) {
    xs.iter_mut().for_each(|v| *v = if *v > T::zero() { *v } else { T::zero() });
}

impl<'m, T: Real> SparseEngine<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Self { model }
    }

    fn weight(&self, id: crate::params::ParamId) -> &[T] {
        self.model.store.param(id).value.data()
    }

    /// Runs one `[C, S, S]` sample.
    pub fn forward_sample(&self, x: &[T]) -> Result<SampleTrace<T>> {
        let bb = &self.model.backbone;
        let store = &self.model.store;
        let cfg = &bb.config;
        let side = cfg.input_side;
        if x.len() != cfg.in_channels * side * side {
            return Err(shape_err("sparse_forward", format!("sample of {} values for {}x{side}x{side}", x.len(), cfg.in_channels)));
        }
        let mut ungated = 0u64;
        let stem_g = ConvGeom::new(cfg.in_channels, side, side, cfg.widths[0], 3, 1, 1).expect("validated config");
        let mut h = vec![T::zero(); stem_g.c_out * stem_g.out_plane()];
        let mut cols = vec![T::zero(); stem_g.patch() * stem_g.out_plane()];
        kernels::conv_sample(x, self.weight(bb.stem), &stem_g, &mut h, &mut cols);
        ungated += stem_g.macs();
        for (c, plane) in h.chunks_exact_mut(stem_g.out_plane()).enumerate() {
            bn_apply(store, &bb.stem_bn, c, plane);
        }
        relu(&mut h);

        let n = bb.blocks.len();
        let mut active_all = Vec::with_capacity(n);
        let mut block_macs = Vec::with_capacity(n);
        let mut gate_macs = Vec::with_capacity(n);
        for blk in &bb.blocks {
            let in_plane = blk.in_side * blk.in_side;
            let gate = &blk.gate;
            let mut macs = 0u64;

            let mut z = vec![T::zero(); blk.c_in];
            kernels::plane_means(&h, in_plane, &mut z);
            macs += (blk.c_in * in_plane) as u64;
            let mut hid = vec![T::zero(); gate.hidden];
            kernels::matmul_nt(1, blk.c_in, gate.hidden, &z, self.weight(gate.w0), &mut hid, false);
            macs += (blk.c_in * gate.hidden) as u64;
            for (c, v) in hid.iter_mut().enumerate() {
                bn_apply(store, &gate.bn, c, core::slice::from_mut(v));
            }
            relu(&mut hid);
            let mut logits = vec![T::zero(); blk.c_out];
            kernels::matmul_nt(1, gate.hidden, blk.c_out, &hid, self.weight(gate.w1), &mut logits, false);
            macs += (gate.hidden * blk.c_out) as u64;
            logits.iter_mut().zip(self.weight(gate.b1)).for_each(|(o, b)| *o += *b);
            gate_macs.push(macs);
            let active: Vec<usize> = (0..blk.c_out).filter(|&c| logits[c] >= T::zero()).collect();
            let a = active.len();

            let g1 = ConvGeom::new(blk.c_in, blk.in_side, blk.in_side, a.max(1), 3, blk.stride, 1).expect("validated");
            let mid_plane = g1.out_plane();
            let mut y1 = vec![T::zero(); a * mid_plane];
            if a > 0 {
                let g1 = ConvGeom { c_out: a, ..g1 };
                let w1 = self.weight(blk.conv1);
                let patch = g1.patch();
                let mut wa = Vec::with_capacity(a * patch);
                for &c in &active {
                    wa.extend_from_slice(&w1[c * patch..(c + 1) * patch]);
                }
                let mut cols = vec![T::zero(); patch * mid_plane];
                kernels::conv_sample(&h, &wa, &g1, &mut y1, &mut cols);
                macs += (a * patch * mid_plane) as u64;
                for (plane, &c) in y1.chunks_exact_mut(mid_plane).zip(&active) {
                    bn_apply(store, &blk.bn1, c, plane);
                }
                relu(&mut y1);
            }

            let out_plane = blk.out_side * blk.out_side;
            let mut y2 = vec![T::zero(); blk.c_out * out_plane];
            if a > 0 {
                let g2 = ConvGeom::new(a, blk.out_side, blk.out_side, blk.c_out, 3, 1, 1).expect("validated");
                let w2 = self.weight(blk.conv2);
                let full_patch = blk.c_out * 9;
                let mut wa = Vec::with_capacity(blk.c_out * a * 9);
                for o in 0..blk.c_out {
                    let row = &w2[o * full_patch..(o + 1) * full_patch];
                    for &c in &active {
                        wa.extend_from_slice(&row[c * 9..(c + 1) * 9]);
                    }
                }
                let mut cols = vec![T::zero(); g2.patch() * out_plane];
                kernels::conv_sample(&y1, &wa, &g2, &mut y2, &mut cols);
                macs += g2.macs();
            }
            for (c, plane) in y2.chunks_exact_mut(out_plane).enumerate() {
                bn_apply(store, &blk.bn2, c, plane);
            }

            let sc = match &blk.shortcut {
                Some(sc) => {
                    let g = ConvGeom::new(blk.c_in, blk.in_side, blk.in_side, blk.c_out, 1, blk.stride, 0).expect("validated");
                    let mut s = vec![T::zero(); blk.c_out * out_plane];
                    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { g.patch() * out_plane }];
                    kernels::conv_sample(&h, self.weight(sc.conv), &g, &mut s, &mut cols);
                    ungated += g.macs();
                    for (c, plane) in s.chunks_exact_mut(out_plane).enumerate() {
                        bn_apply(store, &sc.bn, c, plane);
                    }
                    s
                }
                None => h,
            };
            y2.iter_mut().zip(&sc).for_each(|(y, s)| *y = *y + *s);
            relu(&mut y2);
            h = y2;
            active_all.push(active);
            block_macs.push(macs);
        }
        let last = bb.blocks.last().map_or(side, |b| b.out_side);
        let mut embedding = vec![T::zero(); cfg.embed_dim()];
        kernels::plane_means(&h, last * last, &mut embedding);
        Ok(SampleTrace { embedding, active: active_all, block_macs, gate_macs, ungated_macs: ungated })
    }

    /// Runs a `[B, C, S, S]` batch sample by sample.
    pub fn sparse_forward(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, SparseExecStats, Vec<SampleTrace<T>>)> {
        let b = batch.shape()[0];
        let per = batch.len() / b;
        let traces: Vec<SampleTrace<T>> =
            batch.data().chunks_exact(per).map(|x| self.forward_sample(x)).collect::<Result<_>>()?;
        let d = self.model.backbone.embed_dim();
        let emb: Vec<T> = traces.iter().flat_map(|t| t.embedding.iter().copied()).collect();
        let stats = self.collect_stats(&traces);
        Ok((Tensor::new(&[b, d], emb)?, stats, traces))
    }

    pub fn collect_stats(&self, traces: &[SampleTrace<T>]) -> SparseExecStats {
        let blocks = self
            .model
            .backbone
            .blocks
            .iter()
            .enumerate()
            .map(|(l, blk)| {
                let geom = blk.geometry();
                BlockExecStats {
                    name: blk.name.clone(),
                    channels: blk.c_out,
                    active: traces.iter().map(|t| t.active[l].len()).collect(),
                    macs: traces.iter().map(|t| t.block_macs[l]).collect(),
                    dense: geom.dense_macs(),
                    overhead: geom.gate_overhead(),
                }
            })
            .collect();
        SparseExecStats { blocks, ungated_macs: traces.iter().map(|t| t.ungated_macs).collect() }
    }
}

/// Split-level budget summary.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetReport {
    /// Mean measured conv MACs of gated blocks over their dense count.
    pub mean_ratio: f64,
    /// Gate overhead over the dense count (constant per sample).
    pub overhead_ratio: f64,
    pub per_block: Vec<(String, f64)>,
    /// Counts of per-sample ratios in ten equal bins over `[0, 1]`.
    pub histogram: [usize; 10],
}

impl BudgetReport {
    /// The quantity regularized during training: gate overhead included.
    pub fn ratio_with_overhead(&self) -> f64 {
        self.mean_ratio + self.overhead_ratio
    }
}

pub fn measure_budget(stats: &SparseExecStats) -> Result<BudgetReport> {
    let n = stats.samples();
    if n == 0 {
        return Err(crate::error::Error::Empty("sparse execution stats"));
    }
    let dense = stats.dense_total() as f64;
    let mut histogram = [0usize; 10];
    let mut sum = 0.0;
    for i in 0..n {
        let r = stats.sample_ratio(i);
        sum += r;
        histogram[((r * 10.0) as usize).min(9)] += 1;
    }
    Ok(BudgetReport {
        mean_ratio: sum / n as f64,
        overhead_ratio: stats.overhead_total() as f64 / dense,
        per_block: stats.blocks.iter().map(|b| (b.name.clone(), b.ratio())).collect(),
        histogram,
    })
}
