//! Reverse-mode differentiation tape.
//!
//! Every primitive pushes a node holding its forward value and, when any
//! input requires a gradient, a closure that maps the node's output gradient
//! onto its parents. Nodes are appended in evaluation order, so a reverse
//! sweep over ids is a valid topological order.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use super::element::Element;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<'_, T>)>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    macs: RefCell<Option<BTreeMap<&'static str, u64>>>,
    tag: Cell<&'static str>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            macs: RefCell::new(None),
            tag: Cell::new("other"),
        }
    }

    /// A tape that only evaluates; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Enable multiply-accumulate counting, bucketed by the current tag.
    pub fn instrumented(mut self) -> Self {
        self.macs = RefCell::new(Some(BTreeMap::new()));
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub(crate) fn push<F>(&self, value: Tensor<T>, parents: &[usize], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &mut GradSink<'_, T>) + 'static,
    {
        self.push_shared(Rc::new(value), parents, backward)
    }

    /// Like [`push`](Self::push) for a value the backward closure also holds.
    pub(crate) fn push_shared<F>(&self, value: Rc<Tensor<T>>, parents: &[usize], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &mut GradSink<'_, T>) + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Run `f` with MAC counts attributed to `tag`.
    pub fn with_tag<R>(&self, tag: &'static str, f: impl FnOnce() -> R) -> R {
        let prev = self.tag.replace(tag);
        let out = f();
        self.tag.set(prev);
        out
    }

    pub(crate) fn count_macs(&self, n: usize) {
        if let Some(map) = self.macs.borrow_mut().as_mut() {
            *map.entry(self.tag.get()).or_insert(0) += n as u64;
        }
    }

    /// MAC totals per tag; empty unless the tape is instrumented.
    pub fn mac_counts(&self) -> BTreeMap<&'static str, u64> {
        self.macs.borrow().clone().unwrap_or_default()
    }

    /// Gradients of a single-element output with respect to every node.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let value = output.value();
        if value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got {:?}",
                value.shape()
            )));
        }
        self.backward_seeded(&[(output, Tensor::full(value.shape(), T::one()))])
    }

    /// Backpropagate explicit output gradients.
    pub fn backward_seeded(&self, seeds: &[(Var<'_, T>, Tensor<T>)]) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let mut sink = GradSink {
            nodes: &nodes,
            grads: (0..nodes.len()).map(|_| None).collect(),
        };
        let mut top = 0;
        for (var, grad) in seeds {
            if var.value().shape() != grad.shape() {
                return Err(Error::shape("seed gradient shape differs from its output"));
            }
            sink.add(var.id, grad.clone());
            top = top.max(var.id);
        }
        for id in (0..=top).rev() {
            if let Some(backward) = &nodes[id].backward {
                if let Some(grad) = sink.grads[id].take() {
                    backward(&grad, &mut sink);
                }
            }
        }
        Ok(Gradients { grads: sink.grads })
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

/// Accumulates gradients during the reverse sweep.
pub struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> GradSink<'_, T> {
    pub fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Accumulate into node `id`'s gradient buffer in place.
    pub fn acc(&mut self, id: usize, f: impl FnOnce(&mut [T])) {
        if !self.wants(id) {
            return;
        }
        let slot = &mut self.grads[id];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    pub fn add(&mut self, id: usize, grad: Tensor<T>) {
        if !self.wants(id) {
            return;
        }
        debug_assert_eq!(grad.numel(), self.nodes[id].value.numel());
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e += *g;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(
                    self.nodes[id].value.shape().to_vec(),
                    grad.into_data(),
                ))
            }
        }
    }
}

/// Result of a backward sweep; holds gradients of leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Fresh owned copy of the value.
    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value()).clone()
    }

    pub(crate) fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}
