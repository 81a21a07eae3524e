//! Residual encoder with channel-gated basic blocks.
//!
//! Each basic block computes
//!
//! ```text
//! y1  = mask * relu(bn1(conv1(x)))
//! out = relu(bn2(conv2(y1)) + shortcut(x))
//! ```
//!
//! where `mask` comes from a squeeze-and-excitation style gate evaluated on the
//! block input: `logits = W1 relu(bn(W0 gap(x))) + b1`, `W0: [C_out/r, C_in]`,
//! `W1: [C_out, C_out/r]`. At inference a channel is on iff its logit is
//! `>= 0`. During training the mask is a binary-concrete sample with a
//! straight-through gradient. The stem and the shortcut are never gated.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Gumbel};

use crate::error::{Error, Result};
use crate::flops::BlockGeometry;
use crate::graph::{Graph, Mode, Var};
use crate::kernels::conv_out_dim;
use crate::params::{uniform_init, Binding, BnLayout, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Initial value of the gate output bias, so that training starts with every
/// channel on.
pub const GATE_BIAS_INIT: f64 = 1.0;

/// Whether a parameter name belongs to a gate network (`fc0`, `bn`, `fc1`).
pub fn is_gate_param(name: &str) -> bool {
    name.contains(".gate.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Channel width of each stage; the first stage runs at the input
    /// resolution, each later one halves it.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub input_side: usize,
    /// Gate bottleneck reduction ratio `r`.
    pub reduction: usize,
    pub in_channels: usize,
}

impl BackboneConfig {
    /// Three stages of 16/32/64 channels, two blocks each, `r = 4`.
    pub fn desk() -> Self {
        Self { widths: alloc::vec![16, 32, 64], blocks_per_stage: 2, input_side: 32, reduction: 4, in_channels: 3 }
    }

    /// ResNet18 widths with `r = 16`.
    pub fn full() -> Self {
        Self { widths: alloc::vec![64, 128, 256, 512], blocks_per_stage: 2, input_side: 32, reduction: 16, in_channels: 3 }
    }

    pub fn embed_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("backbone.widths must be non-empty and positive, got {:?}", self.widths));
        }
        if self.blocks_per_stage == 0 {
            return bad("backbone.blocks_per_stage must be >= 1".into());
        }
        if self.reduction == 0 {
            return bad("backbone.reduction must be >= 1".into());
        }
        if let Some(w) = self.widths.iter().find(|&&w| w / self.reduction < 1) {
            return bad(format!("gate hidden width {w}/{} is zero", self.reduction));
        }
        if self.in_channels == 0 {
            return bad("backbone.in_channels must be >= 1".into());
        }
        let mut side = self.input_side;
        for _ in 1..self.widths.len() {
            side = conv_out_dim(side, 3, 2, 1).unwrap_or(0);
        }
        if self.input_side == 0 || side == 0 {
            return bad(format!("input side {} too small for {} stages", self.input_side, self.widths.len()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GateLayout {
    pub w0: ParamId,
    pub bn: BnLayout,
    pub w1: ParamId,
    pub b1: ParamId,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct Shortcut {
    pub conv: ParamId,
    pub bn: BnLayout,
}

#[derive(Clone, Debug)]
pub struct BlockLayout {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub in_side: usize,
    pub out_side: usize,
    pub conv1: ParamId,
    pub bn1: BnLayout,
    pub conv2: ParamId,
    pub bn2: BnLayout,
    pub shortcut: Option<Shortcut>,
    pub gate: GateLayout,
}

impl BlockLayout {
    pub fn geometry(&self) -> BlockGeometry {
        BlockGeometry {
            c_in: self.c_in,
            c_out: self.c_out,
            kernel: 3,
            hidden: self.gate.hidden,
            in_h: self.in_side,
            in_w: self.in_side,
            mid_h: self.out_side,
            mid_w: self.out_side,
            out_h: self.out_side,
            out_w: self.out_side,
        }
    }

    /// MACs of the ungated 1x1 projection shortcut, if present.
    pub fn shortcut_macs(&self) -> u64 {
        match self.shortcut {
            Some(_) => (self.c_in * self.c_out * self.out_side * self.out_side) as u64,
            None => 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: ParamId,
    pub stem_bn: BnLayout,
    pub blocks: Vec<BlockLayout>,
}

/// Gate decisions of one block for one batch.
#[derive(Clone, Debug)]
pub struct GateState<T> {
    /// Gate network output `g(x)`, `[B, C_out]`.
    pub logits: Var,
    /// Relaxed mask in `(0, 1)`; equals `hard` outside training.
    pub soft: Var,
    /// Mask applied in the forward pass. Its value is `hard`; in training its
    /// gradient flows to `soft`.
    pub mask: Var,
    /// Binary mask, exactly 0 or 1.
    pub hard: Tensor<T>,
    pub temperature: Option<T>,
}

impl<T: Real> GateState<T> {
    /// Number of active channels per sample.
    pub fn active_counts(&self) -> Vec<usize> {
        let c = self.hard.shape()[1];
        self.hard.data().chunks_exact(c).map(|r| r.iter().filter(|&&m| m > T::zero()).count()).collect()
    }
}

/// How gated blocks turn logits into masks.
pub enum GatePolicy<'a, T> {
    /// Binary-concrete sampling at temperature `tau` (training).
    Relaxed { tau: T, rng: &'a mut Rng },
    /// `mask = sigmoid(logits / tau)` with no noise and no hard forward; a
    /// smooth surrogate used for gradient checking.
    Soft { tau: T },
    /// `mask = 1[logits >= 0]` (inference).
    Threshold,
    /// Externally supplied `[B, C_out]` masks, one per gated block.
    Forced(&'a [Tensor<T>]),
}

/// `W1 relu(bn(W0 gap(x))) + b1`.
pub fn gate_logits<T: Real>(
    graph: &mut Graph<T>,
    bind: &Binding,
    store: &mut ParamStore<T>,
    gate: &GateLayout,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let z = graph.gap2d(x)?;
    let h = graph.linear(z, bind[gate.w0], None)?;
    let h = gate.bn.forward(graph, bind, store, h, mode)?;
    let h = graph.relu(h)?;
    graph.linear(h, bind[gate.w1], Some(bind[gate.b1]))
}

/// `G1 - G0` for two independent standard Gumbel draws: a standard logistic
/// variate.
pub fn logistic_noise<T: Real>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit scale is valid");
    let n = crate::tensor::numel(shape);
    let data = (0..n)
        .map(|_| {
            let g1: f64 = gumbel.sample(rng);
            let g0: f64 = gumbel.sample(rng);
            T::lit(g1 - g0)
        })
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Binary-concrete relaxation: `soft = sigmoid((logits + G1 - G0) / tau)`,
/// `hard = 1[soft >= 0.5]`, forward uses `hard`, backward goes through `soft`.
pub fn sample_mask_train<T: Real>(graph: &mut Graph<T>, logits: Var, tau: T, rng: &mut Rng) -> Result<GateState<T>> {
    if !(tau > T::zero()) {
        return Err(Error::Config(format!("gate temperature must be positive, got {tau}")));
    }
    let noise = logistic_noise(graph.shape(logits), rng);
    let perturbed = graph.add_const(logits, &noise)?;
    let scaled = graph.scale(perturbed, T::one() / tau)?;
    let soft = graph.sigmoid(scaled)?;
    let half = T::lit(0.5);
    let hard = graph.value(soft).map(|s| if s >= half { T::one() } else { T::zero() });
    let mask = graph.straight_through(soft, hard.clone())?;
    Ok(GateState { logits, soft, mask, hard, temperature: Some(tau) })
}

/// Noise-free `sigmoid(logits / tau)` used directly as the mask; `hard` holds
/// the corresponding threshold decision.
pub fn sample_mask_soft<T: Real>(graph: &mut Graph<T>, logits: Var, tau: T) -> Result<GateState<T>> {
    if !(tau > T::zero()) {
        return Err(Error::Config(format!("gate temperature must be positive, got {tau}")));
    }
    let scaled = graph.scale(logits, T::one() / tau)?;
    let soft = graph.sigmoid(scaled)?;
    let hard = threshold(graph.value(logits));
    Ok(GateState { logits, soft, mask: soft, hard, temperature: Some(tau) })
}

/// Deterministic `1[logits >= 0]`.
pub fn sample_mask_eval<T: Real>(graph: &mut Graph<T>, logits: Var) -> GateState<T> {
    let hard = threshold(graph.value(logits));
    let mask = graph.constant(hard.clone());
    GateState { logits, soft: mask, mask, hard, temperature: None }
}

pub fn threshold<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    logits.map(|g| if g >= T::zero() { T::one() } else { T::zero() })
}

fn forced_mask<T: Real>(graph: &mut Graph<T>, logits: Var, mask: &Tensor<T>) -> Result<GateState<T>> {
    mask.require_shape("forced gate mask", graph.shape(logits))?;
    let m = graph.constant(mask.clone());
    Ok(GateState { logits, soft: m, mask: m, hard: mask.clone(), temperature: None })
}

impl Backbone {
    pub fn register<T: Real>(config: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let w0 = config.widths[0];
        let cin = config.in_channels;
        let stem = store.add("stem.conv.weight".into(), uniform_init(&[w0, cin, 3, 3], cin * 9, rng), true);
        let stem_bn = BnLayout::register(store, "stem.bn", w0, true);
        let mut blocks = Vec::new();
        let mut side = config.input_side;
        let mut c_in = w0;
        for (s, &c_out) in config.widths.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let out_side = conv_out_dim(side, 3, stride, 1).expect("validated");
                let name = format!("layer{}.{}", s + 1, b);
                let conv1 = store.add(format!("{name}.conv1.weight"), uniform_init(&[c_out, c_in, 3, 3], c_in * 9, rng), true);
                let bn1 = BnLayout::register(store, &format!("{name}.bn1"), c_out, true);
                let conv2 = store.add(format!("{name}.conv2.weight"), uniform_init(&[c_out, c_out, 3, 3], c_out * 9, rng), true);
                let bn2 = BnLayout::register(store, &format!("{name}.bn2"), c_out, true);
                let shortcut = (stride != 1 || c_in != c_out).then(|| Shortcut {
                    conv: store.add(format!("{name}.shortcut.conv.weight"), uniform_init(&[c_out, c_in, 1, 1], c_in, rng), true),
                    bn: BnLayout::register(store, &format!("{name}.shortcut.bn"), c_out, true),
                });
                let hidden = c_out / config.reduction;
                let gw0 = store.add(format!("{name}.gate.fc0.weight"), uniform_init(&[hidden, c_in], c_in, rng), true);
                let gbn = BnLayout::register(store, &format!("{name}.gate.bn"), hidden, true);
                let gw1 = store.add(format!("{name}.gate.fc1.weight"), uniform_init(&[c_out, hidden], hidden, rng), true);
                let gb1 = store.add(format!("{name}.gate.fc1.bias"), Tensor::full(&[c_out], T::lit(GATE_BIAS_INIT)), false);
                blocks.push(BlockLayout {
                    name,
                    c_in,
                    c_out,
                    stride,
                    in_side: side,
                    out_side,
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    shortcut,
                    gate: GateLayout { w0: gw0, bn: gbn, w1: gw1, b1: gb1, hidden },
                });
                side = out_side;
                c_in = c_out;
            }
        }
        Ok(Self { config: config.clone(), stem, stem_bn, blocks })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    pub fn geometries(&self) -> Vec<BlockGeometry> {
        self.blocks.iter().map(BlockLayout::geometry).collect()
    }

    /// MACs of the ungated stem convolution per sample.
    pub fn stem_macs(&self) -> u64 {
        let s = self.config.input_side;
        (self.config.in_channels * 9 * self.config.widths[0] * s * s) as u64
    }

    #[allow(clippy::too_many_arguments)]
    pub fn block_forward<T: Real>(
        &self,
        graph: &mut Graph<T>,
        bind: &Binding,
        store: &mut ParamStore<T>,
        index: usize,
        x: Var,
        mode: Mode,
        policy: &mut GatePolicy<'_, T>,
    ) -> Result<(Var, GateState<T>)> {
        let blk = &self.blocks[index];
        let logits = gate_logits(graph, bind, store, &blk.gate, x, mode)?;
        let state = match policy {
            GatePolicy::Relaxed { tau, rng } => sample_mask_train(graph, logits, *tau, rng)?,
            GatePolicy::Soft { tau } => sample_mask_soft(graph, logits, *tau)?,
            GatePolicy::Threshold => sample_mask_eval(graph, logits),
            GatePolicy::Forced(masks) => {
                let m = masks.get(index).ok_or_else(|| Error::Mismatch(format!("no forced mask for block {index}")))?;
                forced_mask(graph, logits, m)?
            }
        };
        let y = graph.conv2d(x, bind[blk.conv1], blk.stride, 1)?;
        let y = blk.bn1.forward(graph, bind, store, y, mode)?;
        let y = graph.relu(y)?;
        let y = graph.channel_mask(y, state.mask)?;
        let y = graph.conv2d(y, bind[blk.conv2], 1, 1)?;
        let y = blk.bn2.forward(graph, bind, store, y, mode)?;
        let sc = match &blk.shortcut {
            Some(sc) => {
                let s = graph.conv2d(x, bind[sc.conv], blk.stride, 0)?;
                sc.bn.forward(graph, bind, store, s, mode)?
            }
            None => x,
        };
        let out = graph.add(y, sc)?;
        Ok((graph.relu(out)?, state))
    }

    /// Stem, gated stages and global pooling: `[B, C, S, S]` → `[B, d_enc]`.
    pub fn encode<T: Real>(
        &self,
        graph: &mut Graph<T>,
        bind: &Binding,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
        policy: &mut GatePolicy<'_, T>,
    ) -> Result<(Var, Vec<GateState<T>>)> {
        let h = graph.conv2d(x, bind[self.stem], 1, 1)?;
        let h = self.stem_bn.forward(graph, bind, store, h, mode)?;
        let mut h = graph.relu(h)?;
        let mut states = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            let (next, state) = self.block_forward(graph, bind, store, i, h, mode, policy)?;
            h = next;
            states.push(state);
        }
        Ok((graph.gap2d(h)?, states))
    }
}

/// Exponential temperature anneal from `start` to `end` across `epochs`,
/// constant within an epoch.
pub fn tau_at(epoch: usize, epochs: usize, start: f64, end: f64) -> f64 {
    if epochs <= 1 {
        return start;
    }
    let t = (epoch.min(epochs - 1)) as f64 / (epochs - 1) as f64;
    start * num_traits::Float::powf(end / start, t)
}

/// Random binary masks for tests and oracles.
pub fn random_mask<T: Real>(shape: &[usize], p_on: f64, rng: &mut Rng) -> Tensor<T> {
    let n = crate::tensor::numel(shape);
    let data = (0..n).map(|_| if rng.random::<f64>() < p_on { T::one() } else { T::zero() }).collect();
    Tensor::new(shape, data).expect("length matches shape")
}
