use std::cell::{Ref, RefCell};
use std::fmt;
use std::sync::Arc;

use super::Tensor;
use crate::error::{contract, Result};
use crate::graph::Graph;

pub(crate) type NodeId = usize;

/// Recorded operation. Parents always have smaller ids than the node that
/// references them, so the node list is a topological order.
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    Reshape {
        a: NodeId,
    },
    GroupedLinear {
        x: NodeId,
        w: NodeId,
        groups: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    Relu {
        a: NodeId,
    },
    MaskMul {
        a: NodeId,
        mask: Vec<f64>,
    },
    /// Output (the node's own value) is reused by the backward pass.
    Softmax {
        a: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    MaxOf {
        parts: Vec<NodeId>,
        argmax: Vec<u32>,
    },
    Sum {
        a: NodeId,
    },
    SumSquares {
        a: NodeId,
    },
    Nll {
        logits: NodeId,
        probs: Vec<f64>,
        labels: Vec<usize>,
        rows: Vec<usize>,
    },
    Propagate {
        x: NodeId,
        graph: Arc<Graph>,
    },
    GatherAggregate {
        edges: NodeId,
        graph: Arc<Graph>,
    },
    EdgeAttention(Box<super::ops::EdgeAttentionSaved>),
    Select {
        a: NodeId,
        index: usize,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::GroupedLinear { x, w, .. } => vec![*x, *w],
            Op::Transpose { a }
            | Op::Reshape { a }
            | Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::MaskMul { a, .. }
            | Op::Softmax { a }
            | Op::Sum { a }
            | Op::SumSquares { a }
            | Op::Select { a, .. } => vec![*a],
            Op::Concat { parts } | Op::MaxOf { parts, .. } => parts.clone(),
            Op::Nll { logits, .. } => vec![*logits],
            Op::Propagate { x, .. } => vec![*x],
            Op::GatherAggregate { edges, .. } => vec![*edges],
            Op::EdgeAttention(saved) => {
                let mut p = vec![saved.query];
                p.extend(&saved.keys);
                p.extend(&saved.values);
                p
            }
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// A tape is confined to one thread; build a fresh tape per forward pass.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable input; gradients flow into it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        debug_assert!(op.parents().iter().all(|&p| p < id));
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub(crate) fn requires_grad(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse pass from a scalar root.
    ///
    /// The tape is left untouched, so several roots recorded on the same tape
    /// can be differentiated one after another.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(contract("backward root belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(contract(format!(
                "backward root must be a scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut acc = GradAccumulator {
            nodes: &nodes,
            grads: (0..nodes.len()).map(|_| None).collect(),
        };
        acc.grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = acc.grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.requires_grad {
                super::ops::backward(&node.op, &node.value, &g, &mut acc);
            }
            acc.grads[id] = Some(g);
        }
        let grads = acc
            .grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|data| Tensor::from_parts(n.value.shape().to_vec(), data)))
            .collect();
        Ok(Gradients { grads })
    }
}

pub(crate) struct GradAccumulator<'a> {
    pub(crate) nodes: &'a [Node],
    grads: Vec<Option<Vec<f64>>>,
}

impl<'a> GradAccumulator<'a> {
    pub(crate) fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub(crate) fn value(&self, id: NodeId) -> &'a Tensor {
        &self.nodes[id].value
    }

    /// Adds into the gradient buffer of `id`, allocating it on first use.
    pub(crate) fn with_grad(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let len = self.nodes[id].value.numel();
        let buf = self.grads[id].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    pub(crate) fn add(&mut self, id: NodeId, contribution: &[f64]) {
        self.with_grad(id, |buf| {
            for (b, c) in buf.iter_mut().zip(contribution) {
                *b += c;
            }
        });
    }
}

/// Gradients of one backward pass, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `var`, if the backward pass reached it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`; unreachable nodes yield zeros of the right shape.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}
