use std::cell::{Cell, RefCell};

use super::Tensor;
use crate::error::{Error, Result};

/// Vector-Jacobian product of one recorded operation: upstream gradient in,
/// one optional gradient per input out (aligned with the recorded inputs).
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    /// Tape index of each recorded input, `None` for inputs that need no gradient.
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
    shape: Vec<usize>,
}

/// Append-only record of differentiable operations.
///
/// Nodes are appended in execution order, so reverse append order is a valid
/// topological order for the backward sweep. Leaf gradients accumulate across
/// [`Tape::backward`] calls until [`Tape::zero_grad`]; the node list is only
/// cleared by [`Tape::reset`].
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    enabled: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            enabled: Cell::new(true),
        }
    }

    /// A tape that records nothing; every `Var` built on it is a constant.
    pub fn inference() -> Self {
        let t = Self::new();
        t.enabled.set(false);
        t
    }

    pub fn is_recording(&self) -> bool {
        self.enabled.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.grads.get_mut().clear();
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    /// Leaf variable. When `requires_grad` is set (and the tape records), its
    /// gradient is retained after `backward`.
    pub fn var(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let id = (requires_grad && self.is_recording()).then(|| self.push(value.shape().to_vec(), Vec::new(), None));
        Var { tape: self, id, value }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.var(value, false)
    }

    fn push(&self, shape: Vec<usize>, parents: Vec<Option<usize>>, backward: Option<BackwardFn>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents,
            backward,
            shape,
        });
        nodes.len() - 1
    }

    /// Record an operation producing `value` from `inputs`. The backward closure
    /// is only kept if some input carries a gradient.
    pub(crate) fn record(&self, value: Tensor, inputs: &[&Var<'_>], backward: impl Fn(&Tensor) -> Result<Vec<Option<Tensor>>> + 'static) -> Var<'_> {
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.id).collect();
        let id = (self.is_recording() && parents.iter().any(Option::is_some))
            .then(|| self.push(value.shape().to_vec(), parents, Some(Box::new(backward))));
        Var { tape: self, id, value }
    }

    /// Accumulate d(loss)/d(leaf) into every gradient-carrying leaf.
    pub fn backward(&self, loss: &Var<'_>) -> Result<()> {
        if loss.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let root = loss
            .id
            .ok_or_else(|| Error::contract("backward on a value with no recorded history"))?;
        let nodes = self.nodes.borrow();
        let mut pending: Vec<Option<Tensor>> = vec![None; root + 1];
        pending[root] = Some(Tensor::ones(loss.value.shape()));
        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize(nodes.len(), None);
        }
        for i in (0..=root).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &nodes[i];
            match &node.backward {
                None => {
                    debug_assert_eq!(g.shape(), &node.shape[..]);
                    grads[i] = Some(match grads[i].take() {
                        Some(acc) => acc.add(&g)?,
                        None => g,
                    });
                }
                Some(f) => {
                    let parent_grads = f(&g)?;
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        if let (Some(p), Some(pg)) = (p, pg) {
                            pending[*p] = Some(match pending[*p].take() {
                                Some(acc) => acc.add(&pg)?,
                                None => pg,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: &Var<'_>) -> Option<Tensor> {
        v.id.and_then(|i| self.grads.borrow().get(i).cloned().flatten())
    }
}

/// A tensor value bound to a tape position.
#[derive(Clone)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: Option<usize>,
    pub(crate) value: Tensor,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn detach(&self) -> Var<'t> {
        Var {
            tape: self.tape,
            id: None,
            value: self.value.clone(),
        }
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(self)
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(id={:?}, {:?})", self.id, self.value)
    }
}
