//! Joint optimization of the SimSiam loss and the gating budget loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::backbone::{is_gate_param, tau_at, GatePolicy};
use crate::data::{stack_images, two_views, AugmentationConfig, LabeledImage};
use crate::error::{Error, Result};
use crate::flops::{total_gating_loss, BudgetConfig};
use crate::graph::{Graph, Mode};
use crate::model::Model;
use crate::params::{Param, ParamStore};
use crate::rng::{self, tag};
use crate::simsiam::simsiam_loss;

/// Optimizer steps of the 500-epoch, batch-256 schedule on 50,000 images over
/// those of the 50-epoch, batch-128 schedule on 5,000: `97,500 / 1,950`.
pub const DESK_GATE_LR_SCALE: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub budget: BudgetConfig,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Learning-rate multiplier for gate-network parameters.
    pub gate_lr_scale: f64,
}

impl TrainConfig {
    /// 50 epochs, batch 128, lr 0.01 with 5 warmup epochs; gate parameters
    /// at [`DESK_GATE_LR_SCALE`] times the base rate.
    pub fn desk() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            base_lr: 0.01,
            warmup_epochs: 5,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            budget: BudgetConfig::default(),
            tau_start: 5.0,
            tau_end: 0.5,
            gate_lr_scale: DESK_GATE_LR_SCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!("train.warmup_epochs ({}) must be < train.epochs ({})", self.warmup_epochs, self.epochs));
        }
        if self.batch_size < 2 {
            return bad(format!("train.batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.base_lr > 0.0) {
            return bad(format!("train.base_lr must be > 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("train.momentum must be in [0, 1) and train.weight_decay >= 0".into());
        }
        if !(self.gate_lr_scale > 0.0) {
            return bad(format!("train.gate_lr_scale must be > 0, got {}", self.gate_lr_scale));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return bad("gate temperatures must be positive".into());
        }
        self.budget.validate()
    }
}

/// Linear warmup from 0, then half-cosine decay to 0 at the final step.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps + 1);
    if span == 0 {
        return base_lr;
    }
    let t = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + num_traits::Float::cos(core::f64::consts::PI * t))
}

/// SGD with heavy-ball momentum and decoupled-from-BN weight decay:
/// `buf = momentum * buf + (grad + wd * w)`, `w -= lr * buf`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, store: &ParamStore<f32>) -> Self {
        Self { momentum, weight_decay, buffers: store.params().iter().map(|p| vec![0.0; p.value.len()]).collect() }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Vec<f32>], lr: f64) {
        self.step_with(store, grads, |_| lr);
    }

    /// Like [`Sgd::step`] with a learning rate chosen per parameter.
    pub fn step_with(&mut self, store: &mut ParamStore<f32>, grads: &[Vec<f32>], lr: impl Fn(&Param<f32>) -> f64) {
        let mu = self.momentum as f32;
        for ((p, g), buf) in store.params_mut().iter_mut().zip(grads).zip(&mut self.buffers) {
            let lr = lr(p) as f32;
            let wd = if p.decay { self.weight_decay as f32 } else { 0.0 };
            for ((w, &g), b) in p.value.data_mut().iter_mut().zip(g).zip(buf.iter_mut()) {
                let d = g + wd * *w;
                *b = mu * *b + d;
                *w -= lr * *b;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss_ssl: f64,
    pub loss_gate: f64,
    pub flop_ratio: f64,
    pub lr: f64,
    pub tau: f64,
    /// Mean active channels per gated block over both views of the batch.
    pub active_mean: Vec<f64>,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_ssl: f64,
    pub loss_gate: f64,
    pub flop_ratio: f64,
    pub lr: f64,
    pub tau: f64,
    /// Row-weighted mean active channels per gated block over the epoch.
    pub active_mean: Vec<f64>,
}

/// Model, optimizer state and the index of the next epoch to run. Everything
/// random is derived from `(seed, epoch, step, image index)`, so a trainer
/// restored from a checkpoint continues exactly like an uninterrupted one.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub sgd: Sgd,
    pub config: TrainConfig,
    pub augment: AugmentationConfig,
    pub next_epoch: usize,
    /// Disables the gating loss entirely (pure SimSiam ablation).
    pub ssl_only: bool,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, augment: AugmentationConfig) -> Result<Self> {
        config.validate()?;
        augment.validate()?;
        let sgd = Sgd::new(config.momentum, config.weight_decay, &model.store);
        Ok(Self { model, sgd, config, augment, next_epoch: 0, ssl_only: false })
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len / self.config.batch_size
    }

    /// One optimizer step on a batch of `(dataset index, anchor)` pairs.
    pub fn train_step(
        &mut self,
        batch: &[(usize, &LabeledImage)],
        epoch: usize,
        global_step: usize,
        total_steps: usize,
        warmup_steps: usize,
    ) -> Result<StepMetrics> {
        let cfg = &self.config;
        let mut first = Vec::with_capacity(batch.len());
        let mut second = Vec::with_capacity(batch.len());
        for &(idx, im) in batch {
            let mut r = rng::stream(self.augment.seed, &[tag::AUGMENT, epoch as u64, idx as u64]);
            let (a, b) = two_views(im, &self.augment, &mut r);
            first.push(a);
            second.push(b);
        }
        let tau = tau_at(epoch, cfg.epochs, cfg.tau_start, cfg.tau_end);
        let lr = lr_at(global_step, total_steps, warmup_steps, cfg.base_lr);
        let progress = global_step as f64 / total_steps.max(1) as f64;

        let mut g = Graph::<f32>::new();
        let bind = self.model.bind(&mut g, true);
        let x1 = g.constant(stack_images(&first)?);
        let x2 = g.constant(stack_images(&second)?);
        let mut gate_rng = rng::stream(cfg.seed, &[tag::GATE, global_step as u64]);
        let mut policy = GatePolicy::Relaxed { tau: tau as f32, rng: &mut gate_rng };
        let o1 = self.model.forward_view(&mut g, &bind, x1, Mode::Train, &mut policy)?;
        let o2 = self.model.forward_view(&mut g, &bind, x2, Mode::Train, &mut policy)?;
        let ssl = simsiam_loss(&mut g, o1.p, o2.p, o1.z, o2.z)?;
        let report = self.model.flop_report(&mut g, &[&o1.gates, &o2.gates])?;
        let gating = total_gating_loss(&mut g, &report, progress, &cfg.budget)?;
        let loss = if self.ssl_only { ssl } else { g.add(ssl, gating.total)? };
        g.backward(loss)?;

        let grads: Vec<Vec<f32>> = bind
            .vars()
            .iter()
            .map(|&v| g.grad_data(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f32]>::to_vec))
            .collect();
        let loss_ssl = g.value(ssl).data()[0] as f64;
        let loss_gate = g.value(gating.total).data()[0] as f64;
        if !loss_ssl.is_finite() || !loss_gate.is_finite() {
            return Err(Error::NumericFault { op: "train_step", node: loss.index() });
        }
        let gate_lr = lr * cfg.gate_lr_scale;
        self.sgd.step_with(&mut self.model.store, &grads, |p| if is_gate_param(&p.name) { gate_lr } else { lr });
        Ok(StepMetrics {
            loss_ssl,
            loss_gate,
            flop_ratio: report.ratio_value(&g),
            lr,
            tau,
            active_mean: report.blocks.iter().map(|b| b.active_mean).collect(),
            rows: 2 * batch.len(),
        })
    }

    /// Runs epoch `self.next_epoch` over a shuffled dataset (incomplete final
    /// batch dropped) and advances the epoch counter.
    pub fn run_epoch(&mut self, dataset: &[LabeledImage]) -> Result<EpochMetrics> {
        let bs = self.config.batch_size;
        let steps = self.steps_per_epoch(dataset.len());
        if steps == 0 {
            return Err(Error::Config(format!("dataset of {} images is smaller than one batch of {bs}", dataset.len())));
        }
        let epoch = self.next_epoch;
        let total_steps = steps * self.config.epochs;
        let warmup_steps = steps * self.config.warmup_epochs;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng::stream(self.config.seed, &[tag::SHUFFLE, epoch as u64]));

        let blocks = self.model.backbone.blocks.len();
        let mut acc = EpochMetrics { epoch, loss_ssl: 0.0, loss_gate: 0.0, flop_ratio: 0.0, lr: 0.0, tau: 0.0, active_mean: vec![0.0; blocks] };
        let mut rows = 0usize;
        for s in 0..steps {
            let batch: Vec<(usize, &LabeledImage)> = order[s * bs..(s + 1) * bs].iter().map(|&i| (i, &dataset[i])).collect();
            let m = self.train_step(&batch, epoch, epoch * steps + s, total_steps, warmup_steps)?;
            let w = m.rows as f64;
            acc.loss_ssl += m.loss_ssl * w;
            acc.loss_gate += m.loss_gate * w;
            acc.flop_ratio += m.flop_ratio * w;
            acc.active_mean.iter_mut().zip(&m.active_mean).for_each(|(a, b)| *a += b * w);
            acc.lr = m.lr;
            acc.tau = m.tau;
            rows += m.rows;
        }
        let w = rows as f64;
        acc.loss_ssl /= w;
        acc.loss_gate /= w;
        acc.flop_ratio /= w;
        acc.active_mean.iter_mut().for_each(|a| *a /= w);
        self.next_epoch += 1;
        Ok(acc)
    }
}

/// Network FLOP ratio implied by per-block mean active channel counts.
pub fn ratio_from_active(model: &Model<f32>, active_mean: &[f64]) -> f64 {
    let geoms = model.geometries();
    let dense: u64 = geoms.iter().map(|g| g.dense_macs()).sum();
    let dynamic: f64 = geoms
        .iter()
        .zip(active_mean)
        .map(|(g, &a)| a * g.macs_per_channel() as f64 + g.gate_overhead() as f64)
        .sum();
    dynamic / dense as f64
}
