//! Reverse-mode autodiff tape.
//!
//! Ops append nodes to an arena; [`Tape::backward`] walks it in reverse and
//! accumulates gradients additively into pre-zeroed buffers. The tape is
//! freed when it goes out of scope, which bounds memory in training loops
//! that rebuild the graph per sample.

use std::cell::{Cell, RefCell};

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::TensorError;

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<'_, T>)>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    backward: Option<BackwardFn<T>>,
}

/// Arena of computation nodes. One tape per forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    check_finite: Cell<bool>,
}

/// Handle into a [`Tape`]. Copyable; ops are methods on this type.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) idx: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite: Cell::new(false),
        }
    }

    /// Debug mode: every op asserts its output is finite.
    pub fn set_finite_checks(&self, enabled: bool) {
        self.check_finite.set(enabled);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Introduces an input node. Leaves have no backward function; their
    /// gradient is whatever downstream ops accumulate into their slot.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_unchecked(value, None)
    }

    pub(crate) fn push(
        &self,
        op: &'static str,
        value: Tensor<T>,
        backward: Option<BackwardFn<T>>,
    ) -> Result<Var<'_, T>, TensorError> {
        if self.check_finite.get() && !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        Ok(self.push_unchecked(value, backward))
    }

    fn push_unchecked(&self, value: Tensor<T>, backward: Option<BackwardFn<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node { value, backward });
        Var { tape: self, idx }
    }

    /// Runs `f` on the stored values of the given nodes without cloning.
    pub(crate) fn with_values<R>(&self, idxs: &[usize], f: impl FnOnce(&[&Tensor<T>]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let refs: Vec<&Tensor<T>> = idxs.iter().map(|&i| &nodes[i].value).collect();
        f(&refs)
    }

    pub(crate) fn shape_of(&self, idx: usize) -> Shape {
        self.nodes.borrow()[idx].value.shape()
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients; node
    /// buffers are zero-initialized on first contribution, later
    /// contributions add.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        debug_assert!(std::ptr::eq(self, loss.tape));
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.idx].value.shape();
        if loss_shape.len() != 1 {
            return Err(TensorError::NotScalar { shape: loss_shape });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(Tensor::scalar(T::ONE));
        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(f) = nodes[i].backward.as_ref() {
                let mut sink = GradSink { grads: &mut grads };
                f(&g, &mut sink);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn idx(self) -> usize {
        self.idx
    }

    /// The tape this handle lives on, for creating sibling leaves.
    pub fn tape(self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(self) -> Shape {
        self.tape.shape_of(self.idx)
    }

    pub fn rows(self) -> usize {
        self.shape().rows
    }

    pub fn cols(self) -> usize {
        self.shape().cols
    }

    /// Clones the node's value out of the tape.
    pub fn value(self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    /// Extracts the value of a `1 x 1` node.
    pub fn item(self) -> Result<T, TensorError> {
        self.tape.nodes.borrow()[self.idx].value.item()
    }

    pub(crate) fn same_tape(self, other: Var<'t, T>) -> Result<(), TensorError> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::InvalidArg {
                op: "tape",
                msg: "operands belong to different tapes".into(),
            })
        }
    }
}

/// Accumulation target handed to backward closures.
pub struct GradSink<'a, T: Scalar> {
    grads: &'a mut [Option<Tensor<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    /// Adds `contrib` into the slot of node `idx`, allocating on first use.
    pub fn accumulate(&mut self, idx: usize, contrib: Tensor<T>) {
        match &mut self.grads[idx] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), contrib.shape());
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e += *c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }
}

/// Result of a backward pass, indexed by tape node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. a node, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }
}
