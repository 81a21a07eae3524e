//! Frozen-model evaluation: embeddings, 1-NN accuracy, sparse execution
//! statistics and the JSON/CSV reports built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chansel_core::data::{batch_of, LabeledImage};
use chansel_core::eval::{extract_embeddings, knn_accuracy, ChannelCategory, ChannelUsage, EmbeddingSet, UsageCounter};
use chansel_core::model::Model;
use chansel_core::sparse::{measure_budget, BudgetReport, SparseEngine, SparseExecStats};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;

/// Embeds `images` batch by batch on the current rayon pool; batches are
/// joined in order, so the result is independent of the thread count.
pub fn embed(model: &Model<f32>, images: &[LabeledImage], batch_size: usize) -> Result<EmbeddingSet> {
    let parts: Vec<EmbeddingSet> = images
        .par_chunks(batch_size)
        .map(|c| extract_embeddings(model, c, batch_size))
        .collect::<std::result::Result<_, _>>()?;
    let mut it = parts.into_iter();
    let mut set = it.next().ok_or(chansel_core::Error::Empty("image set"))?;
    for p in it {
        set.append(p)?;
    }
    Ok(set)
}

pub fn knn_eval(model: &Model<f32>, bank: &[LabeledImage], queries: &[LabeledImage], batch_size: usize, k: usize) -> Result<f64> {
    let b = embed(model, bank, batch_size)?;
    let q = embed(model, queries, batch_size)?;
    Ok(knn_accuracy(&b, &q, k)?)
}

/// Sparse execution over a split with per-channel usage counts.
pub fn sparse_run(model: &Model<f32>, images: &[LabeledImage], batch_size: usize) -> Result<(SparseExecStats, UsageCounter)> {
    let parts: Vec<(SparseExecStats, UsageCounter)> = images
        .par_chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&LabeledImage> = chunk.iter().collect();
            let (_, stats, traces) = SparseEngine::new(model).sparse_forward(&batch_of(&refs)?)?;
            let mut usage = UsageCounter::for_model(model);
            for t in &traces {
                usage.add_trace(t)?;
            }
            Ok((stats, usage))
        })
        .collect::<std::result::Result<_, chansel_core::Error>>()?;
    let mut it = parts.into_iter();
    let (mut stats, mut usage) = it.next().ok_or(chansel_core::Error::Empty("image set"))?;
    for (s, u) in it {
        stats.append(s);
        usage.merge(&u)?;
    }
    Ok((stats, usage))
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockRatio {
    pub name: String,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BudgetSummary {
    /// Gated MACs including gate overhead over dense gated MACs.
    pub flop_ratio: f64,
    /// The same without gate overhead.
    pub flop_ratio_conv: f64,
    pub per_block: Vec<BlockRatio>,
    /// Per-sample conv-only ratios in ten bins over `[0, 1]`.
    pub histogram: [usize; 10],
}

impl From<&BudgetReport> for BudgetSummary {
    fn from(r: &BudgetReport) -> Self {
        Self {
            flop_ratio: r.ratio_with_overhead(),
            flop_ratio_conv: r.mean_ratio,
            per_block: r.per_block.iter().map(|(n, v)| BlockRatio { name: n.clone(), ratio: *v }).collect(),
            histogram: r.histogram,
        }
    }
}

pub fn budget_summary(stats: &SparseExecStats) -> Result<BudgetSummary> {
    Ok(BudgetSummary::from(&measure_budget(stats)?))
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockCategories {
    pub name: String,
    pub channels: usize,
    pub always_off: usize,
    pub always_on: usize,
    pub dynamic: usize,
}

pub fn categories(usage: &ChannelUsage) -> Vec<BlockCategories> {
    usage
        .blocks
        .iter()
        .map(|b| BlockCategories {
            name: b.name.clone(),
            channels: b.categories.len(),
            always_off: b.count(ChannelCategory::AlwaysOff),
            always_on: b.count(ChannelCategory::AlwaysOn),
            dynamic: b.count(ChannelCategory::Dynamic),
        })
        .collect()
}

/// `block,channel,frequency,category` rows, one per gated channel.
pub fn usage_csv(usage: &ChannelUsage) -> String {
    let mut out = String::from("block,channel,frequency,category\n");
    for b in &usage.blocks {
        for (c, (f, cat)) in b.frequency.iter().zip(&b.categories).enumerate() {
            let _ = writeln!(out, "{},{c},{f},{}", b.name, cat.as_str());
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalysisSummary {
    pub t_d: f64,
    pub knn_acc: f64,
    pub k: usize,
    pub flop_ratio: f64,
    pub flop_ratio_conv: f64,
    pub samples: u64,
    pub blocks: Vec<BlockCategories>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockFlops {
    pub name: String,
    #[serde(rename = "F_dense")]
    pub f_dense: u64,
    #[serde(rename = "F_gate")]
    pub f_gate: u64,
    #[serde(rename = "F_dynamic_mean")]
    pub f_dynamic_mean: f64,
    /// `F_dynamic_mean / F_dense`, gate overhead included.
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlopTotals {
    #[serde(rename = "F_dense")]
    pub f_dense: u64,
    #[serde(rename = "F_gate")]
    pub f_gate: u64,
    #[serde(rename = "F_dynamic_mean")]
    pub f_dynamic_mean: f64,
    pub ratio: f64,
    pub ratio_conv: f64,
    /// Stem, shortcuts and heads, outside the budget.
    #[serde(rename = "F_ungated")]
    pub f_ungated: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlopCount {
    /// `"dense"` for the all-on count, otherwise the split measured.
    pub source: String,
    pub samples: usize,
    pub blocks: Vec<BlockFlops>,
    pub totals: FlopTotals,
}

pub fn flop_count(model: &Model<f32>, stats: Option<&SparseExecStats>, source: &str) -> FlopCount {
    let geoms = model.geometries();
    let names = model.block_names();
    let samples = stats.map_or(0, |s| s.samples());
    let blocks: Vec<BlockFlops> = geoms
        .iter()
        .zip(&names)
        .enumerate()
        .map(|(l, (g, name))| {
            let dynamic = match stats {
                Some(s) => s.blocks[l].macs_mean(),
                None => g.dynamic_macs(g.c_out) as f64,
            };
            BlockFlops {
                name: name.clone(),
                f_dense: g.dense_macs(),
                f_gate: g.gate_overhead(),
                f_dynamic_mean: dynamic,
                ratio: dynamic / g.dense_macs() as f64,
            }
        })
        .collect();
    let f_dense: u64 = blocks.iter().map(|b| b.f_dense).sum();
    let f_gate: u64 = blocks.iter().map(|b| b.f_gate).sum();
    let f_dynamic_mean: f64 = blocks.iter().map(|b| b.f_dynamic_mean).sum();
    FlopCount {
        source: source.to_string(),
        samples,
        totals: FlopTotals {
            f_dense,
            f_gate,
            f_dynamic_mean,
            ratio: f_dynamic_mean / f_dense as f64,
            ratio_conv: (f_dynamic_mean - f_gate as f64) / f_dense as f64,
            f_ungated: model.ungated_macs(),
        },
        blocks,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockInfer {
    pub active_mean: f64,
    pub macs_mean: f64,
    /// Conv MACs over dense conv MACs, gate excluded.
    pub ratio: f64,
}

/// Block name to measured execution statistics.
pub fn infer_stats(stats: &SparseExecStats) -> BTreeMap<String, BlockInfer> {
    stats
        .blocks
        .iter()
        .map(|b| (b.name.clone(), BlockInfer { active_mean: b.active_mean(), macs_mean: b.macs_mean(), ratio: b.ratio() }))
        .collect()
}
