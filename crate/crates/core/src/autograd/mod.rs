//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, which is always a valid topological order. [`Tape::backward`] walks
//! the records once in reverse and returns a [`Gradients`] table. One tape is
//! built per forward/backward cycle and then dropped.
//!
//! ```
//! use joformer::autograd::Tape;
//! use joformer::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod ops;

use std::cell::{Ref, RefCell};
use std::fmt;

pub use ops::CumsumMode;

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Backward rule: given the input values, the output value and the gradient
/// flowing into the output, produce one optional gradient per input.
pub(crate) type BackwardFn<S> =
    Box<dyn Fn(&[&Tensor<S>], &Tensor<S>, &Tensor<S>) -> Vec<Option<Tensor<S>>>>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<S>>,
}

/// Ordered record of a computation.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant; it never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends an operation node. The backward rule is dropped when no input
    /// requires a gradient.
    pub(crate) fn record(
        &self,
        value: Tensor<S>,
        inputs: &[Var<'_, S>],
        backward: BackwardFn<S>,
    ) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
        nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn owns(&self, var: &Var<'_, S>) -> bool {
        std::ptr::eq(self, var.tape)
    }

    /// Propagates gradients from a scalar `loss` to every reachable
    /// variable that requires a gradient. Uses of a variable accumulate.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>, TensorError> {
        if !self.owns(&loss) {
            return Err(TensorError::ForeignVar);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        }

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(rule) = &node.backward else {
                continue;
            };
            // interior gradients are released once propagated
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<S>> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
            let input_grads = rule(&inputs, &node.value, &grad_out);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, grad) in node.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(grad.shape(), nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<S: Scalar> Copy for Var<'_, S> {}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<S>> {
        Ref::map(self.tape.nodes.borrow(), |nodes| &nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, S>) -> Result<(), TensorError> {
        if self.tape.owns(other) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
///
/// Only leaves keep their gradient; interior gradients are released during
/// the backward sweep.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when the variable does not require a gradient or the loss does
    /// not depend on it.
    pub fn get(&self, var: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when the loss does not reach it.
    pub fn take_or_zeros(&mut self, var: Var<'_, S>) -> Tensor<S> {
        self.grads
            .get_mut(var.id)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}
