//! MAC accounting for gated blocks and the budget regularizer.
//!
//! Counts are multiply-accumulates. For a gated basic block with `a` active
//! channels:
//!
//! ```text
//! dense   = k²·C_in·C_out·H'·W' + k²·C_out·C_out·H''·W''
//! dynamic = k²·C_in·a·H'·W'     + k²·a·C_out·H''·W''      + overhead
//! overhead = C_in·H·W + C_in·(C_out/r) + (C_out/r)·C_out
//! ```
//!
//! Both conv terms shrink with the mask because conv1's outputs and conv2's
//! inputs are the same gated channels. Only gated blocks enter the ratio that
//! is regularized towards the target density.

use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::GateState;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    /// Gate bottleneck width `C_out / r`.
    pub hidden: usize,
    /// Block input spatial size.
    pub in_h: usize,
    pub in_w: usize,
    /// conv1 output spatial size.
    pub mid_h: usize,
    pub mid_w: usize,
    /// conv2 output spatial size.
    pub out_h: usize,
    pub out_w: usize,
}

/// Dense MACs of both 3x3 convolutions of a basic block.
pub fn dense_flops(c_in: usize, c_out: usize, k: usize, h1: usize, w1: usize, h2: usize, w2: usize) -> u64 {
    let k2 = (k * k) as u64;
    k2 * (c_in * c_out * h1 * w1) as u64 + k2 * (c_out * c_out * h2 * w2) as u64
}

impl BlockGeometry {
    pub fn dense_macs(&self) -> u64 {
        dense_flops(self.c_in, self.c_out, self.kernel, self.mid_h, self.mid_w, self.out_h, self.out_w)
    }

    /// Conv MACs attributable to a single active channel.
    pub fn macs_per_channel(&self) -> u64 {
        let k2 = (self.kernel * self.kernel) as u64;
        k2 * (self.c_in * self.mid_h * self.mid_w) as u64 + k2 * (self.c_out * self.out_h * self.out_w) as u64
    }

    /// Pooling plus the two gate linear maps.
    pub fn gate_overhead(&self) -> u64 {
        (self.c_in * self.in_h * self.in_w + self.c_in * self.hidden + self.hidden * self.c_out) as u64
    }

    /// Exact dynamic MACs for one sample with `active` channels on.
    pub fn dynamic_macs(&self, active: usize) -> u64 {
        active as u64 * self.macs_per_channel() + self.gate_overhead()
    }
}

/// Ledger entry for one gated block.
#[derive(Clone, Debug)]
pub struct BlockFlops {
    pub name: String,
    pub dense: u64,
    pub overhead: u64,
    /// Batch-mean dynamic MACs, differentiable through the gate relaxation.
    pub dynamic: Var,
    /// Batch-mean number of active channels (forward value).
    pub active_mean: f64,
}

#[derive(Clone, Debug)]
pub struct FlopReport {
    pub blocks: Vec<BlockFlops>,
    pub dense_total: u64,
    /// `sum F_dynamic / sum F_dense`, gate overhead included in the numerator.
    pub ratio: Var,
    /// Stem, shortcuts and heads; informational, excluded from the ratio.
    pub ungated: u64,
}

impl FlopReport {
    pub fn ratio_value<T: Real>(&self, graph: &Graph<T>) -> f64 {
        graph.value(self.ratio).data()[0].as_f64()
    }

    /// Per-block `F_dynamic / F_dense`.
    pub fn block_ratios<T: Real>(&self, graph: &mut Graph<T>) -> Result<Vec<Var>> {
        self.blocks.iter().map(|b| graph.scale(b.dynamic, T::one() / T::lit(b.dense as f64))).collect()
    }
}

/// Batch-mean `F_dynamic` of one block from one or more mask groups (for
/// example both augmented views). The active count is the straight-through mask
/// summed over channels and averaged over every row of every group.
pub fn dynamic_flops<T: Real>(graph: &mut Graph<T>, states: &[&GateState<T>], geom: &BlockGeometry) -> Result<(Var, f64)> {
    if states.is_empty() {
        return Err(Error::Empty("gate states"));
    }
    let mut sums = Vec::with_capacity(states.len());
    let mut rows = 0usize;
    for s in states {
        let shape = graph.shape(s.mask);
        if shape.len() != 2 || shape[1] != geom.c_out {
            return Err(crate::error::shape_err("dynamic_flops", alloc::format!("mask {shape:?} for {} channels", geom.c_out)));
        }
        rows += shape[0];
        sums.push(graph.sum(s.mask)?);
    }
    let total = graph.add_all(&sums)?;
    let active = graph.scale(total, T::one() / T::lit(rows as f64))?;
    let active_mean = graph.value(active).data()[0].as_f64();
    let conv = graph.scale(active, T::lit(geom.macs_per_channel() as f64))?;
    Ok((graph.add_scalar(conv, T::lit(geom.gate_overhead() as f64))?, active_mean))
}

/// Builds the ledger for all gated blocks. `views[v][l]` is the gate state of
/// block `l` for mask group `v`.
pub fn ledger<T: Real>(
    graph: &mut Graph<T>,
    names: &[String],
    geoms: &[BlockGeometry],
    views: &[&[GateState<T>]],
    ungated: u64,
) -> Result<FlopReport> {
    if geoms.is_empty() {
        return Err(Error::Empty("gated blocks"));
    }
    let mut blocks = Vec::with_capacity(geoms.len());
    let mut terms = Vec::with_capacity(geoms.len());
    for (l, geom) in geoms.iter().enumerate() {
        let states: Vec<&GateState<T>> = views
            .iter()
            .map(|v| v.get(l).ok_or(Error::Mismatch(alloc::format!("missing gate state for block {l}"))))
            .collect::<Result<_>>()?;
        let (dynamic, active_mean) = dynamic_flops(graph, &states, geom)?;
        terms.push(dynamic);
        blocks.push(BlockFlops {
            name: names.get(l).cloned().unwrap_or_default(),
            dense: geom.dense_macs(),
            overhead: geom.gate_overhead(),
            dynamic,
            active_mean,
        });
    }
    let dense_total: u64 = blocks.iter().map(|b| b.dense).sum();
    let sum = graph.add_all(&terms)?;
    let ratio = graph.scale(sum, T::one() / T::lit(dense_total as f64))?;
    Ok(FlopReport { blocks, dense_total, ratio, ungated })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BudgetConfig {
    /// Target density `t_d` in `(0, 1]`.
    pub target: f64,
    /// Weight of the global sparsity term.
    pub lambda: f64,
    /// Weight of the per-block bound term.
    pub gamma: f64,
    /// Fraction of training over which per-block bounds relax.
    pub bound_horizon: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { target: 0.5, lambda: 5.0, gamma: 1.0, bound_horizon: 0.3 }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target > 0.0 && self.target <= 1.0) {
            return Err(Error::Config(alloc::format!("budget.t_d must be in (0, 1], got {}", self.target)));
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config("budget.lambda and budget.gamma must be >= 0".into()));
        }
        if !(self.bound_horizon > 0.0 && self.bound_horizon <= 1.0) {
            return Err(Error::Config(alloc::format!("budget.bound_horizon must be in (0, 1], got {}", self.bound_horizon)));
        }
        Ok(())
    }

    /// Deadband half-width of the per-block bound at a training progress.
    pub fn bound_slack(&self, progress: f64) -> f64 {
        let t = self.target.min(1.0 - self.target);
        (progress / self.bound_horizon).min(1.0) * (1.0 - t)
    }
}

/// `lambda * (ratio - t_d)^2`.
pub fn sparsity_loss<T: Real>(graph: &mut Graph<T>, report: &FlopReport, cfg: &BudgetConfig) -> Result<Var> {
    let d = graph.add_scalar(report.ratio, T::lit(-cfg.target))?;
    let sq = graph.square(d)?;
    graph.scale(sq, T::lit(cfg.lambda))
}

/// Unweighted `(1/L) sum_l max(0, |r_l - t_d| - slack(progress))^2` over
/// per-block ratios `r_l`.
pub fn bound_loss<T: Real>(graph: &mut Graph<T>, ratios: &[Var], progress: f64, cfg: &BudgetConfig) -> Result<Var> {
    if ratios.is_empty() {
        return Err(Error::Empty("block ratios"));
    }
    let slack = cfg.bound_slack(progress.clamp(0.0, 1.0));
    let mut terms = Vec::with_capacity(ratios.len());
    for &r in ratios {
        let d = graph.add_scalar(r, T::lit(-cfg.target))?;
        let d = graph.abs(d)?;
        let d = graph.add_scalar(d, T::lit(-slack))?;
        let d = graph.relu(d)?;
        terms.push(graph.square(d)?);
    }
    let total = graph.add_all(&terms)?;
    graph.scale(total, T::one() / T::lit(ratios.len() as f64))
}

/// `sparsity + gamma * bound`.
#[derive(Clone, Copy, Debug)]
pub struct GatingLoss {
    pub total: Var,
    pub sparsity: Var,
    pub bound: Var,
}

pub fn total_gating_loss<T: Real>(graph: &mut Graph<T>, report: &FlopReport, progress: f64, cfg: &BudgetConfig) -> Result<GatingLoss> {
    let sparsity = sparsity_loss(graph, report, cfg)?;
    let ratios = report.block_ratios(graph)?;
    let bound = bound_loss(graph, &ratios, progress, cfg)?;
    let weighted = graph.scale(bound, T::lit(cfg.gamma))?;
    let total = graph.add(sparsity, weighted)?;
    Ok(GatingLoss { total, sparsity, bound })
}
