//! Define-by-run reverse-mode differentiation.
//!
//! Every forward op evaluates eagerly and appends a node holding its output
//! and a backward rule. Nodes are stored in creation order, which is a
//! topological order, so `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn<S> = Box<dyn Fn(&BackwardCtx<'_, S>) -> Vec<Option<Vec<S>>>>;

struct Node<S> {
    value: Tensor<S>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
    op: &'static str,
}

/// What a backward rule sees: its inputs, its output and the upstream gradient.
pub struct BackwardCtx<'a, S> {
    graph: &'a Graph<S>,
    node: usize,
    grad: &'a [S],
    needs: Vec<bool>,
}

impl<'a, S: Scalar> BackwardCtx<'a, S> {
    pub fn input(&self, k: usize) -> &'a Tensor<S> {
        let var = self.graph.nodes[self.node].inputs[k];
        &self.graph.nodes[var.0].value
    }

    pub fn output(&self) -> &'a Tensor<S> {
        &self.graph.nodes[self.node].value
    }

    pub fn grad_out(&self) -> &'a [S] {
        self.grad
    }

    /// Whether input `k` participates in differentiation.
    pub fn needs(&self, k: usize) -> bool {
        self.needs[k]
    }
}

/// The tape. Single owner; one per forward evaluation.
pub struct Graph<S = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; gradients are not tracked through it.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false)
    }

    /// A differentiable input (parameter or probed input).
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            op: "leaf",
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Records an op. The output must be finite.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<S>,
        inputs: Vec<Var>,
        backward: BackwardFn<S>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            backward: requires_grad.then_some(backward),
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar root. Each node is visited once.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            // Leaves have no rule, so their accumulated gradients stay put.
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let ctx = BackwardCtx {
                graph: self,
                node: idx,
                grad: &grad,
                needs,
            };
            let input_grads = rule(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for (var, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[var.0].value.numel(), "{}", node.op);
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let mut out = Vec::with_capacity(grads.len());
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            let keep = node.inputs.is_empty() && node.requires_grad;
            out.push(if keep {
                g.map(|g| Tensor::new(node.value.shape(), g)).transpose()?
            } else {
                None
            });
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradients of a scalar root with respect to the graph's differentiable leaves.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a leaf; leaves the root does not depend on get zeros.
    pub fn get(&self, graph: &Graph<S>, v: Var) -> Tensor<S> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.shape(v)),
        }
    }

    pub fn take(&mut self, graph: &Graph<S>, v: Var) -> Tensor<S> {
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(graph.shape(v)),
        }
    }
}
