use std::sync::Arc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackwardFn<S> = Box<dyn Fn(&Tensor<S>, &mut Gradients<S>)>;

pub(crate) struct Node<S: Scalar> {
    pub value: Tensor<S>,
    pub requires_grad: bool,
    backward: Option<BackwardFn<S>>,
}

/// Gradient slots, one per tape node.
pub struct Gradients<S: Scalar> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.slots.get(var.0).and_then(|s| s.as_ref())
    }

    /// Accumulate `delta` into the slot for `var`.
    pub(crate) fn accumulate(&mut self, var: Var, delta: Tensor<S>) {
        match &mut self.slots[var.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Records a forward computation and replays it in reverse for gradients.
///
/// One tape per training step: build leaves, compose ops, call
/// [`Tape::backward`] on the scalar loss, read gradients, drop the tape.
pub struct Tape<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf tensor. Gradient flows to it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    /// A leaf that never receives gradient (masks, targets, constants).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<S>,
        requires_grad: bool,
        backward: Option<BackwardFn<S>>,
    ) -> Var {
        debug_assert!(!self.consumed, "op recorded after backward");
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var(id)
    }

    /// Shared Arc to a node's value (cheap; for capture in closures).
    pub(crate) fn value_arc(&self, var: Var) -> Tensor<S> {
        self.nodes[var.0].value.clone()
    }

    /// Run reverse-mode accumulation from scalar `loss`.
    ///
    /// Seeds d(loss)/d(loss) = 1 and walks nodes in reverse creation order,
    /// so every node's gradient is complete before its backward fn runs.
    /// The tape is consumed: recording or a second backward is a contract
    /// error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::Contract(
                "backward called on an already-consumed tape".into(),
            ));
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::shape(
                "backward",
                loss_value.shape(),
                "loss must be scalar",
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Contract(
                "backward target does not depend on any differentiable leaf".into(),
            ));
        }
        self.consumed = true;
        let mut grads = Gradients {
            slots: vec![None; self.nodes.len()],
        };
        grads.slots[loss.0] = Some(Tensor {
            shape: loss_value.shape().to_vec(),
            data: Arc::new(vec![S::ONE]),
        });
        for id in (0..=loss.0).rev() {
            let Some(grad) = grads.slots[id].clone() else {
                continue;
            };
            if let Some(f) = &self.nodes[id].backward {
                f(&grad, &mut grads);
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
            true,
        );
        let s = tape.sum_all(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_doubles() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let c = tape.constant(Tensor::from_vec(vec![2], vec![5.0, 5.0]).unwrap());
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 5.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn second_backward_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn grad_accumulates_across_uses() {
        // y = x + x => dy/dx = 2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }
}
