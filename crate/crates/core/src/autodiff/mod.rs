//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable op evaluates eagerly and appends a node to the tape.
//! Node indices are assigned in creation order, so a reverse sweep over the
//! node list is a reverse topological order and visits each node once.

mod backward;
pub(crate) mod kernels;
mod ops;

use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

pub use kernels::same_padding;
pub use ops::{BinaryOp, ReduceOp};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive op kinds, used for fault injection and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    MatMul,
    Reshape,
    Permute,
    Conv2d,
    DepthwiseConv2d,
    AvgPool,
    Sum,
    Mean,
    Max,
    Softmax,
    LogSoftmax,
    Gelu,
    Sigmoid,
    HardSwish,
    Rsqrt,
    Gather,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::MatMul,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Conv2d,
        OpKind::DepthwiseConv2d,
        OpKind::AvgPool,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Max,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::HardSwish,
        OpKind::Rsqrt,
        OpKind::Gather,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::MatMul => "matmul",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Conv2d => "conv2d",
            OpKind::DepthwiseConv2d => "depthwise_conv2d",
            OpKind::AvgPool => "avg_pool",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Max => "max",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::HardSwish => "hard_swish",
            OpKind::Rsqrt => "rsqrt",
            OpKind::Gather => "gather",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var, ops::Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Conv2d(Var, Var, kernels::ConvGeom),
    DwConv2d(Var, Var, kernels::ConvGeom),
    AvgPool(Var, kernels::ConvGeom),
    Reduce(Var, ReduceOp, [bool; 4], Option<Vec<usize>>),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Gelu(Var),
    Sigmoid(Var),
    HardSwish(Var),
    Rsqrt(Var),
    Gather(Var, Arc<[usize]>),
}

impl Op {
    pub(crate) fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Binary(BinaryOp::Add, ..) => OpKind::Add,
            Op::Binary(BinaryOp::Sub, ..) => OpKind::Sub,
            Op::Binary(BinaryOp::Mul, ..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::Conv2d(..) => OpKind::Conv2d,
            Op::DwConv2d(..) => OpKind::DepthwiseConv2d,
            Op::AvgPool(..) => OpKind::AvgPool,
            Op::Reduce(_, ReduceOp::Sum, ..) => OpKind::Sum,
            Op::Reduce(_, ReduceOp::Mean, ..) => OpKind::Mean,
            Op::Reduce(_, ReduceOp::Max, ..) => OpKind::Max,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::HardSwish(..) => OpKind::HardSwish,
            Op::Rsqrt(..) => OpKind::Rsqrt,
            Op::Gather(..) => OpKind::Gather,
        })
    }
}

pub(crate) struct Node<T> {
    pub value: Arc<Tensor<T>>,
    pub op: Op,
    pub requires_grad: bool,
}

/// A computation graph recorded as a Wengert list.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    /// Accumulated gradients of leaves that require grad.
    leaf_grads: Vec<Option<Tensor<T>>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            fault: None,
        }
    }

    /// Corrupts the backward rule of one op kind. Only meant for exercising
    /// gradient checkers.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf sharing storage with a parameter.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let seed = Tensor::ones(shape);
        self.backward_seeded(loss, seed)
    }

    /// Reverse sweep starting from an explicit cotangent for `out`, i.e. the
    /// gradient of `Σ out ⊙ seed` without recording that product.
    pub fn backward_seeded(&mut self, out: Var, seed: Tensor<T>) -> Result<()> {
        if seed.shape() != self.shape(out) {
            return Err(Error::dim("backward", self.shape(out), seed.shape()));
        }
        let loss = out;
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.leaf_grads.len() <= i {
                    self.leaf_grads.resize_with(i + 1, || None);
                }
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let mut contribs = self.backward_node(i, &g);
            if let (Some(f), Some(kind)) = (self.fault, self.nodes[i].op.kind()) {
                if f == kind {
                    for (_, c) in &mut contribs {
                        c.scale_in_place(T::of(1.25));
                    }
                }
            }
            for (input, c) in contribs {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
