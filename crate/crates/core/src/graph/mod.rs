//! Reverse-mode automatic differentiation over a closed set of tensor ops.
//!
//! A [`Graph`] is an append-only tape. Every op evaluates eagerly, stores its
//! output and whatever it needs for the backward pass, and returns a [`Var`]
//! handle. [`Graph::backward`] walks the tape once in reverse and accumulates
//! gradients into the slots of leaves created with `requires_grad = true`.
//! Gradients keep accumulating across calls until [`Graph::zero_grad`].

mod backward;
mod ops;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub use ops::{RunningStats, BN_EPS, BN_MOMENTUM};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether normalization layers use batch statistics and gates sample noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, stride: usize, padding: usize },
    BatchNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, mean: Vec<T>, inv_std: Vec<T>, train: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Gap2d { x: Var },
    L2Normalize { x: Var, norms: Vec<T> },
    StopGradient,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ChannelMask { x: Var, mask: Var },
    StraightThrough { soft: Var },
    Scale { x: Var, factor: T },
    Shift { x: Var },
    Square { x: Var },
    Abs { x: Var },
    Sum { x: Var },
    RowDotMean { a: Var, b: Var },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Linear { .. } => "linear",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Gap2d { .. } => "gap2d",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::StopGradient => "stop_gradient",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::ChannelMask { .. } => "channel_mask",
            Op::StraightThrough { .. } => "straight_through",
            Op::Scale { .. } => "scale",
            Op::Shift { .. } => "shift",
            Op::Square { .. } => "square",
            Op::Abs { .. } => "abs",
            Op::Sum { .. } => "sum",
            Op::RowDotMean { .. } => "rowdot_mean",
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    fault_checks: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// An empty tape with NaN/Inf detection enabled.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), fault_checks: true }
    }

    /// Toggles the per-op finiteness scan.
    pub fn set_fault_checks(&mut self, on: bool) {
        self.fault_checks = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Accumulated gradient of a leaf, if any has been written.
    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let data = self.grads[v.0].clone()?;
        Tensor::new(self.nodes[v.0].value.shape(), data).ok()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let index = self.nodes.len();
        if self.fault_checks && !value.is_finite() {
            return Err(Error::NumericFault { op: op.name(), node: index });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Ok(Var(index))
    }

    /// Accumulates `d loss / d leaf` into every gradient-tracking leaf that
    /// `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.len();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adjoints: Vec<Option<Vec<T>>> = Vec::new();
        adjoints.resize_with(loss.0 + 1, || None);
        adjoints[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = adjoints[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(g) => g.iter_mut().zip(&dy).for_each(|(g, d)| *g += *d),
                    slot => *slot = Some(dy),
                }
                continue;
            }
            backward::propagate(&self.nodes, i, &dy, &mut adjoints);
        }
        if self.fault_checks {
            for (i, g) in self.grads.iter().enumerate() {
                if g.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                    return Err(Error::NumericFault { op: "backward", node: i });
                }
            }
        }
        Ok(())
    }
}
