//! Frozen-encoder evaluation: embedding extraction, nearest-neighbour
//! accuracy and per-channel gate usage.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::GatePolicy;
use crate::data::{batch_of, LabeledImage};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::kernels;
use crate::model::Model;
use crate::sparse::SampleTrace;
use crate::tensor::Tensor;

/// Row-normalized embeddings with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Builds a set from raw rows, L2-normalizing each.
    pub fn from_rows(dim: usize, mut data: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || data.len() != dim * labels.len() {
            return Err(Error::Mismatch(alloc::format!(
                "{} values for {} rows of width {dim}",
                data.len(),
                labels.len()
            )));
        }
        for (i, row) in data.chunks_exact_mut(dim).enumerate() {
            let n = num_traits::Float::sqrt(row.iter().map(|v| v * v).sum::<f32>());
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Degenerate { op: "embedding normalization", row: i });
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self { dim, data, labels })
    }

    pub fn append(&mut self, other: EmbeddingSet) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Mismatch(alloc::format!("embedding width {} vs {}", other.dim, self.dim)));
        }
        self.data.extend(other.data);
        self.labels.extend(other.labels);
        Ok(())
    }
}

/// Dense eval-mode pass with hard threshold gates over one batch.
///
/// Returns `[B, d_enc]` embeddings and the `[B, C_out]` mask of every block.
pub fn encode_eval(model: &mut Model<f32>, batch: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
    let mut graph = Graph::new();
    let bind = model.bind(&mut graph, false);
    let x = graph.constant(batch.clone());
    let (emb, gates) = model.encode(&mut graph, &bind, x, Mode::Eval, &mut GatePolicy::Threshold)?;
    Ok((graph.value(emb).clone(), gates.into_iter().map(|g| g.hard).collect()))
}

/// Embeds `images` in batches of `batch_size` with the frozen encoder.
pub fn extract_embeddings(model: &Model<f32>, images: &[LabeledImage], batch_size: usize) -> Result<EmbeddingSet> {
    if images.is_empty() {
        return Err(Error::Empty("image set"));
    }
    let mut local = model.clone();
    let dim = model.backbone.embed_dim();
    let mut data = Vec::with_capacity(images.len() * dim);
    for chunk in images.chunks(batch_size.max(1)) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let (emb, _) = encode_eval(&mut local, &batch_of(&refs)?)?;
        data.extend_from_slice(emb.data());
    }
    EmbeddingSet::from_rows(dim, data, images.iter().map(|im| im.label).collect())
}

const QUERY_CHUNK: usize = 256;

/// Predicted labels of `queries` by cosine `k`-NN over `bank`.
///
/// With `k = 1` ties go to the lowest bank index. For larger `k` the majority
/// label wins, ties resolved in favour of the label of the nearer neighbour.
pub fn knn_predict(bank: &EmbeddingSet, queries: &EmbeddingSet, k: usize) -> Result<Vec<usize>> {
    if bank.is_empty() || queries.is_empty() {
        return Err(Error::Empty("k-NN bank or query set"));
    }
    if bank.dim != queries.dim {
        return Err(Error::Mismatch(alloc::format!("bank width {} vs query width {}", bank.dim, queries.dim)));
    }
    if k == 0 || k > bank.len() {
        return Err(Error::Config(alloc::format!("k must be in 1..={}, got {k}", bank.len())));
    }
    let (n, d) = (bank.len(), bank.dim);
    let mut preds = Vec::with_capacity(queries.len());
    let mut sims = vec![0f32; QUERY_CHUNK * n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for q in queries.data.chunks(QUERY_CHUNK * d) {
        let m = q.len() / d;
        kernels::matmul_nt(m, d, n, q, &bank.data, &mut sims[..m * n], false);
        for row in sims[..m * n].chunks_exact(n) {
            if k == 1 {
                let mut best = 0;
                for (j, &s) in row.iter().enumerate().skip(1) {
                    if s > row[best] {
                        best = j;
                    }
                }
                preds.push(bank.labels[best]);
                continue;
            }
            order.clear();
            order.extend(0..n);
            let nearer = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
            order.select_nth_unstable_by(k - 1, nearer);
            let top = &mut order[..k];
            top.sort_by(nearer);
            let mut votes: Vec<(usize, usize, usize)> = Vec::new();
            for (rank, &j) in top.iter().enumerate() {
                match votes.iter_mut().find(|v| v.0 == bank.labels[j]) {
                    Some(v) => v.1 += 1,
                    None => votes.push((bank.labels[j], 1, rank)),
                }
            }
            let win = votes.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2))).expect("k >= 1");
            preds.push(win.0);
        }
    }
    Ok(preds)
}

/// Fraction of `queries` whose `k`-NN label matches.
pub fn knn_accuracy(bank: &EmbeddingSet, queries: &EmbeddingSet, k: usize) -> Result<f64> {
    let preds = knn_predict(bank, queries, k)?;
    let hits = preds.iter().zip(&queries.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / queries.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelCategory {
    AlwaysOff,
    AlwaysOn,
    Dynamic,
}

impl ChannelCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AlwaysOff => "always_off",
            Self::AlwaysOn => "always_on",
            Self::Dynamic => "dynamic",
        }
    }
}

/// Running per-channel activation counts across samples.
#[derive(Clone, Debug, PartialEq)]
pub struct UsageCounter {
    names: Vec<String>,
    counts: Vec<Vec<u64>>,
    samples: u64,
}

impl UsageCounter {
    pub fn new(names: Vec<String>, channels: &[usize]) -> Self {
        let counts = channels.iter().map(|&c| vec![0; c]).collect();
        Self { names, counts, samples: 0 }
    }

    pub fn for_model<T>(model: &Model<T>) -> Self {
        let ch: Vec<usize> = model.backbone.blocks.iter().map(|b| b.c_out).collect();
        Self::new(model.backbone.blocks.iter().map(|b| b.name.clone()).collect(), &ch)
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn add_trace<T>(&mut self, trace: &SampleTrace<T>) -> Result<()> {
        if trace.active.len() != self.counts.len() {
            return Err(Error::Mismatch(alloc::format!("trace has {} blocks, expected {}", trace.active.len(), self.counts.len())));
        }
        for (counts, active) in self.counts.iter_mut().zip(&trace.active) {
            for &c in active {
                *counts.get_mut(c).ok_or_else(|| Error::Mismatch(alloc::format!("channel {c} out of range")))? += 1;
            }
        }
        self.samples += 1;
        Ok(())
    }

    /// Adds a batch given as one `[B, C_out]` binary mask per block.
    pub fn add_masks(&mut self, masks: &[Tensor<f32>]) -> Result<()> {
        if masks.len() != self.counts.len() {
            return Err(Error::Mismatch(alloc::format!("{} masks for {} blocks", masks.len(), self.counts.len())));
        }
        let mut batch = None;
        for (counts, m) in self.counts.iter_mut().zip(masks) {
            let c = counts.len();
            let b = m.len() / c;
            if m.len() != b * c || *batch.get_or_insert(b) != b {
                return Err(Error::Mismatch(alloc::format!("mask shape {:?} for {c} channels", m.shape())));
            }
            for row in m.data().chunks_exact(c) {
                for (n, &v) in counts.iter_mut().zip(row) {
                    *n += (v > 0.5) as u64;
                }
            }
        }
        self.samples += batch.unwrap_or(0) as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &UsageCounter) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Mismatch("usage counters over different blocks".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.samples += other.samples;
        Ok(())
    }

    pub fn finish(&self) -> Result<ChannelUsage> {
        if self.samples == 0 {
            return Err(Error::Empty("channel usage samples"));
        }
        let blocks = self
            .names
            .iter()
            .zip(&self.counts)
            .map(|(name, counts)| {
                let categories = counts
                    .iter()
                    .map(|&n| match n {
                        0 => ChannelCategory::AlwaysOff,
                        n if n == self.samples => ChannelCategory::AlwaysOn,
                        _ => ChannelCategory::Dynamic,
                    })
                    .collect();
                BlockUsage {
                    name: name.clone(),
                    counts: counts.clone(),
                    frequency: counts.iter().map(|&n| n as f64 / self.samples as f64).collect(),
                    categories,
                }
            })
            .collect();
        Ok(ChannelUsage { blocks, samples: self.samples })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockUsage {
    pub name: String,
    pub counts: Vec<u64>,
    pub frequency: Vec<f64>,
    pub categories: Vec<ChannelCategory>,
}

impl BlockUsage {
    pub fn count(&self, cat: ChannelCategory) -> usize {
        self.categories.iter().filter(|&&c| c == cat).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelUsage {
    pub blocks: Vec<BlockUsage>,
    pub samples: u64,
}

impl ChannelUsage {
    pub fn count(&self, cat: ChannelCategory) -> usize {
        self.blocks.iter().map(|b| b.count(cat)).sum()
    }

    pub fn channels(&self) -> usize {
        self.blocks.iter().map(|b| b.categories.len()).sum()
    }
}
