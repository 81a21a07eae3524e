//! Named parameter and running-statistics storage.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, RunningStats, Var};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether weight decay applies. False for batch-norm affine terms and
    /// all biases.
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    stats: Vec<(String, RunningStats<T>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), stats: Vec::new() }
    }

    pub fn add(&mut self, name: String, value: Tensor<T>, decay: bool) -> ParamId {
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: String, channels: usize) -> StatsId {
        self.stats.push((name, RunningStats::new(channels)));
        StatsId(self.stats.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats<T> {
        &self.stats[id.0].1
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats<T> {
        &mut self.stats[id.0].1
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn all_stats(&self) -> &[(String, RunningStats<T>)] {
        &self.stats
    }

    pub fn all_stats_mut(&mut self) -> &mut [(String, RunningStats<T>)] {
        &mut self.stats
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Binding {
        Binding(self.params.iter().map(|p| graph.leaf(p.value.clone(), requires_grad)).collect())
    }

    /// Same layout with values converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), decay: p.decay })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|(n, s)| {
                    let conv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect();
                    (n.clone(), RunningStats { mean: conv(&s.mean), var: conv(&s.var) })
                })
                .collect(),
        }
    }

    /// Copies values from `other`, which must have an identical layout.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() || self.stats.len() != other.stats.len() {
            return Err(Error::Mismatch(alloc::format!(
                "expected {} params / {} stats, got {} / {}",
                self.params.len(),
                self.stats.len(),
                other.params.len(),
                other.stats.len()
            )));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Mismatch(alloc::format!(
                    "parameter {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
            a.value = b.value.clone();
        }
        for (a, b) in self.stats.iter_mut().zip(&other.stats) {
            if a.0 != b.0 || a.1.channels() != b.1.channels() {
                return Err(Error::Mismatch(alloc::format!("running stats {} vs {}", a.0, b.0)));
            }
            a.1 = b.1.clone();
        }
        Ok(())
    }
}

/// Graph handles for every parameter of a store, in registration order.
#[derive(Clone, Debug)]
pub struct Binding(Vec<Var>);

impl Binding {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// A batch-norm layer: optional affine parameters and its running statistics.
#[derive(Clone, Copy, Debug)]
pub struct BnLayout {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub stats: StatsId,
}

impl BnLayout {
    pub fn register<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, affine: bool) -> Self {
        let (gamma, beta) = if affine {
            (
                Some(store.add(alloc::format!("{name}.weight"), Tensor::ones(&[channels]), false)),
                Some(store.add(alloc::format!("{name}.bias"), Tensor::zeros(&[channels]), false)),
            )
        } else {
            (None, None)
        };
        Self { gamma, beta, stats: store.add_stats(alloc::format!("{name}.running"), channels) }
    }

    pub fn forward<T: Real>(
        &self,
        graph: &mut Graph<T>,
        bind: &Binding,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = self.gamma.map(|p| bind[p]);
        let beta = self.beta.map(|p| bind[p]);
        graph.batch_norm(x, gamma, beta, store.stats_mut(self.stats), mode)
    }

    /// `(scale, shift)` per channel for eval-mode execution.
    pub fn eval_affine<T: Real>(&self, store: &ParamStore<T>, channel: usize) -> (T, T) {
        let s = store.stats(self.stats);
        let gamma = self.gamma.map_or(T::one(), |p| store.param(p).value.data()[channel]);
        let beta = self.beta.map_or(T::zero(), |p| store.param(p).value.data()[channel]);
        crate::kernels::bn_eval_affine(s.mean[channel], s.var[channel], gamma, beta, T::lit(crate::graph::BN_EPS))
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the default initialization of
/// convolution and linear layers in common frameworks.
pub fn uniform_init<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = 1.0 / num_traits::Float::sqrt(fan_in as f64);
    let n = crate::tensor::numel(shape);
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("length matches shape")
}
