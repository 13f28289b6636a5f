//! Reverse-mode tape. Every op records a closure that maps the output
//! gradient to gradients of its inputs; `backward` replays them in reverse.

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::{Real, Tensor};

pub(crate) type Backward<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<Backward<T>>,
    leaf: bool,
}

/// A value on (or off) the tape. `id` is `None` for constants.
#[derive(Clone)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    id: Option<usize>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub(crate) fn arc(&self) -> Arc<Tensor<T>> {
        self.value.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape { nodes: RefCell::new(Vec::new()), enabled: true }
    }

    /// A tape that records nothing; ops skip their backward bookkeeping.
    pub fn no_grad() -> Tape<T> {
        Tape { nodes: RefCell::new(Vec::new()), enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.enabled
    }

    /// Differentiable input (a parameter, or an input under test).
    pub fn leaf(&self, value: Arc<Tensor<T>>) -> Var<T> {
        if !self.enabled {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: Vec::new(), backward: None, leaf: true });
        Var { value, id: Some(nodes.len() - 1) }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var { value: Arc::new(value), id: None }
    }

    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        let value = Arc::new(value);
        if !self.needs_grad(parents) {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
            leaf: false,
        });
        Var { value, id: Some(nodes.len() - 1) }
    }

    /// Whether an op over `parents` must record a backward closure.
    pub(crate) fn needs_grad(&self, parents: &[&Var<T>]) -> bool {
        self.enabled && parents.iter().any(|p| p.id.is_some())
    }

    /// Propagates `seed` (the gradient of some scalar with respect to
    /// `root`) back to every leaf.
    pub fn backward(self, root: &Var<T>, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), root.shape(), "seed shape must match root");
        let mut nodes = self.nodes.into_inner();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(rid) = root.id else {
            return Gradients { grads };
        };
        grads[rid] = Some(seed);
        for i in (0..=rid).rev() {
            let node = &mut nodes[i];
            if node.leaf {
                continue;
            }
            let Some(g) = grads[i].take() else {
                node.backward = None;
                continue;
            };
            let f = node.backward.take().expect("node replayed once");
            let mask: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
            let pg = f(&g, &mask);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (p, gp) in node.parents.iter().zip(pg) {
                if let (Some(pid), Some(gp)) = (p, gp) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&gp),
                        slot @ None => *slot = Some(gp),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.id.and_then(|i| self.grads[i].as_ref())
    }

    pub fn take(&mut self, v: &Var<T>) -> Option<Tensor<T>> {
        v.id.and_then(|i| self.grads[i].take())
    }
}
