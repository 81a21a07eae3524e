//! Projector, predictor and the symmetric stop-gradient cosine objective.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::params::{uniform_init, Binding, BnLayout, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadsConfig {
    /// Number of linear layers in the projector (>= 2).
    pub proj_layers: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
}

impl HeadsConfig {
    /// `d_enc → 256 → 256` projector, `256 → 64 → 256` predictor.
    pub fn desk() -> Self {
        Self { proj_layers: 2, proj_hidden: 256, proj_dim: 256, pred_hidden: 64 }
    }

    pub fn full() -> Self {
        Self { proj_layers: 3, proj_hidden: 2048, proj_dim: 2048, pred_hidden: 512 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.proj_layers < 2 || self.proj_hidden == 0 || self.proj_dim == 0 || self.pred_hidden == 0 {
            return Err(Error::Config(format!("head widths must be positive with >= 2 projector layers: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Hidden {
    weight: ParamId,
    bn: BnLayout,
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub config: HeadsConfig,
    pub input_dim: usize,
    proj_hidden: Vec<Hidden>,
    proj_out: ParamId,
    proj_bn: BnLayout,
    pred_hidden: Hidden,
    pred_out: ParamId,
    pred_bias: ParamId,
}

impl Heads {
    pub fn register<T: Real>(config: &HeadsConfig, input_dim: usize, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut proj_hidden = Vec::new();
        let mut width = input_dim;
        for i in 0..config.proj_layers - 1 {
            let name = format!("projector.{i}");
            let weight = store.add(format!("{name}.weight"), uniform_init(&[config.proj_hidden, width], width, rng), true);
            let bn = BnLayout::register(store, &format!("{name}.bn"), config.proj_hidden, true);
            proj_hidden.push(Hidden { weight, bn });
            width = config.proj_hidden;
        }
        let last = config.proj_layers - 1;
        let proj_out = store.add(format!("projector.{last}.weight"), uniform_init(&[config.proj_dim, width], width, rng), true);
        let proj_bn = BnLayout::register(store, &format!("projector.{last}.bn"), config.proj_dim, false);
        let d = config.proj_dim;
        let h = config.pred_hidden;
        let pred_hidden = Hidden {
            weight: store.add("predictor.0.weight".into(), uniform_init(&[h, d], d, rng), true),
            bn: BnLayout::register(store, "predictor.0.bn", h, true),
        };
        let pred_out = store.add("predictor.1.weight".into(), uniform_init(&[d, h], h, rng), true);
        let pred_bias = store.add("predictor.1.bias".into(), uniform_init(&[d], h, rng), false);
        Ok(Self { config: config.clone(), input_dim, proj_hidden, proj_out, proj_bn, pred_hidden, pred_out, pred_bias })
    }

    /// Projector `h`: `[B, d_enc]` → `[B, d_proj]`.
    pub fn project<T: Real>(&self, graph: &mut Graph<T>, bind: &Binding, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for layer in &self.proj_hidden {
            h = graph.linear(h, bind[layer.weight], None)?;
            h = layer.bn.forward(graph, bind, store, h, mode)?;
            h = graph.relu(h)?;
        }
        let h = graph.linear(h, bind[self.proj_out], None)?;
        self.proj_bn.forward(graph, bind, store, h, mode)
    }

    /// Bottleneck predictor `g`: `[B, d_proj]` → `[B, d_proj]`.
    pub fn predict<T: Real>(&self, graph: &mut Graph<T>, bind: &Binding, store: &mut ParamStore<T>, z: Var, mode: Mode) -> Result<Var> {
        let h = graph.linear(z, bind[self.pred_hidden.weight], None)?;
        let h = self.pred_hidden.bn.forward(graph, bind, store, h, mode)?;
        let h = graph.relu(h)?;
        graph.linear(h, bind[self.pred_out], Some(bind[self.pred_bias]))
    }

    /// MACs of projector and predictor per sample.
    pub fn macs(&self) -> u64 {
        let c = &self.config;
        let mut total = 0u64;
        let mut width = self.input_dim;
        for _ in 0..c.proj_layers - 1 {
            total += (width * c.proj_hidden) as u64;
            width = c.proj_hidden;
        }
        total += (width * c.proj_dim) as u64;
        total + 2 * (c.proj_dim * c.pred_hidden) as u64
    }
}

/// Negative cosine similarity, averaged over rows: `-(1/B) sum_i <â_i, b̂_i>`.
pub fn negcos<T: Real>(graph: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let an = graph.l2_normalize(a)?;
    let bn = graph.l2_normalize(b)?;
    let dot = graph.rowdot_mean(an, bn)?;
    graph.scale(dot, -T::one())
}

/// `½ D(p1, sg(z2)) + ½ D(p2, sg(z1))`.
pub fn simsiam_loss<T: Real>(graph: &mut Graph<T>, p1: Var, p2: Var, z1: Var, z2: Var) -> Result<Var> {
    let z1s = graph.stop_gradient(z1)?;
    let z2s = graph.stop_gradient(z2)?;
    symmetric_loss(graph, p1, p2, z1s, z2s)
}

/// The same objective without stop-gradient, used to check that the
/// stop-gradient edges are what blocks the target-branch gradient.
pub fn symmetric_loss<T: Real>(graph: &mut Graph<T>, p1: Var, p2: Var, z1: Var, z2: Var) -> Result<Var> {
    let a = negcos(graph, p1, z2)?;
    let b = negcos(graph, p2, z1)?;
    let s = graph.add(a, b)?;
    graph.scale(s, T::lit(0.5))
}
