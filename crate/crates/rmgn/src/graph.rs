//! Minimal reverse-mode tape over `ndarray` dynamic arrays.
//!
//! Every forward pass builds a fresh graph; nodes hold the computed value
//! plus a backward closure that scatters the incoming gradient to the
//! node's parents. Evaluation is single-threaded and the summation order
//! inside each op is fixed, so runs are bit-reproducible.

use crate::scalar::Scalar;
use ndarray::ArrayD;
use std::cell::{Ref, RefCell};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

type BackFn<F> = Box<dyn Fn(&ArrayD<F>, &mut Grads<F>)>;

struct Node<F: Scalar> {
    value: ArrayD<F>,
    back: Option<BackFn<F>>,
}

/// Per-node gradient accumulator produced by [`Graph::backward`].
pub struct Grads<F: Scalar> {
    slots: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn accum(&mut self, id: NodeId, delta: ArrayD<F>) {
        match &mut self.slots[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&ArrayD<F>> {
        self.slots[id.0].as_ref()
    }
}

pub struct Graph<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Non-differentiable input; gradients stop here silently.
    pub fn constant(&self, value: ArrayD<F>) -> NodeId {
        self.push(value, None)
    }

    /// Differentiable input; gradients accumulate and are readable after
    /// `backward`.
    pub fn leaf(&self, value: ArrayD<F>) -> NodeId {
        self.push(value, None)
    }

    pub(crate) fn push(&self, value: ArrayD<F>, back: Option<BackFn<F>>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, back });
        NodeId(nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> Ref<'_, ArrayD<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[id.0].value)
    }

    /// Clones the node value out of the tape.
    pub fn value_owned(&self, id: NodeId) -> ArrayD<F> {
        self.nodes.borrow()[id.0].value.clone()
    }

    /// Extracts a scalar node's value.
    pub fn scalar(&self, id: NodeId) -> F {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().unwrap()
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Grads<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward from non-scalar");
        let mut grads = Grads {
            slots: vec![None; nodes.len()],
        };
        grads.slots[loss.0] = Some(ArrayD::from_elem(nodes[loss.0].value.raw_dim(), F::one()));
        for id in (0..=loss.0).rev() {
            if let Some(g) = grads.slots[id].take() {
                if let Some(back) = &nodes[id].back {
                    back(&g, &mut grads);
                }
                grads.slots[id] = Some(g);
            }
        }
        grads
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
