//! The full trainable network: gated backbone plus SimSiam heads.

use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::{Backbone, BackboneConfig, GatePolicy, GateState};
use crate::error::Result;
use crate::flops::{self, BlockGeometry, FlopReport};
use crate::graph::{Graph, Mode, Var};
use crate::params::{Binding, ParamStore};
use crate::real::Real;
use crate::rng::{self, tag};
use crate::simsiam::{Heads, HeadsConfig};

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub backbone: Backbone,
    pub heads: Heads,
    pub store: ParamStore<T>,
}

/// Graph handles produced by one view through encoder, projector and predictor.
pub struct ViewOutput<T> {
    pub embedding: Var,
    pub z: Var,
    pub p: Var,
    pub gates: Vec<GateState<T>>,
}

impl<T: Real> Model<T> {
    /// Fresh model with default initialization drawn from `seed`.
    pub fn new(backbone: &BackboneConfig, heads: &HeadsConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = rng::stream(seed, &[tag::INIT]);
        let backbone = Backbone::register(backbone, &mut store, &mut init)?;
        let heads = Heads::register(heads, backbone.embed_dim(), &mut store, &mut init)?;
        Ok(Self { backbone, heads, store })
    }

    pub fn block_names(&self) -> Vec<String> {
        self.backbone.blocks.iter().map(|b| b.name.clone()).collect()
    }

    pub fn geometries(&self) -> Vec<BlockGeometry> {
        self.backbone.geometries()
    }

    /// Stem, shortcut and head MACs per sample.
    pub fn ungated_macs(&self) -> u64 {
        self.backbone.stem_macs()
            + self.backbone.blocks.iter().map(|b| b.shortcut_macs()).sum::<u64>()
            + self.heads.macs()
    }

    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Binding {
        self.store.bind(graph, requires_grad)
    }

    pub fn encode(
        &mut self,
        graph: &mut Graph<T>,
        bind: &Binding,
        x: Var,
        mode: Mode,
        policy: &mut GatePolicy<'_, T>,
    ) -> Result<(Var, Vec<GateState<T>>)> {
        self.backbone.encode(graph, bind, &mut self.store, x, mode, policy)
    }

    /// Encoder, projector and predictor for one batch of views.
    pub fn forward_view(
        &mut self,
        graph: &mut Graph<T>,
        bind: &Binding,
        x: Var,
        mode: Mode,
        policy: &mut GatePolicy<'_, T>,
    ) -> Result<ViewOutput<T>> {
        let (embedding, gates) = self.backbone.encode(graph, bind, &mut self.store, x, mode, policy)?;
        let z = self.heads.project(graph, bind, &mut self.store, embedding, mode)?;
        let p = self.heads.predict(graph, bind, &mut self.store, z, mode)?;
        Ok(ViewOutput { embedding, z, p, gates })
    }

    pub fn flop_report(&self, graph: &mut Graph<T>, views: &[&[GateState<T>]]) -> Result<FlopReport> {
        flops::ledger(graph, &self.block_names(), &self.geometries(), views, self.ungated_macs())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { backbone: self.backbone.clone(), heads: self.heads.clone(), store: self.store.cast() }
    }
}
