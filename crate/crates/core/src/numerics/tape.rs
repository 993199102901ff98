//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every forward primitive appends a node holding its output value and, when
//! any input needs a gradient, a backward rule. [`Tape::backward`] walks the
//! nodes in reverse and returns the gradient of a scalar output with respect
//! to every node that requires one.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation.
pub(crate) trait Backward: Send {
    /// Accumulates input gradients given the gradient of this node's output.
    fn backward(&self, tape: &Tape, out: Var, grad: &[f64], sink: &mut GradSink<'_>);
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<Box<dyn Backward>>,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, false, None, None)
    }

    /// Records an input that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, true, None, None)
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.push_node(store.value(id).clone(), trainable, None, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends an operation result; the backward rule is dropped when no
    /// input needs a gradient.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor,
        inputs: &[Var],
        backward: impl Backward + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let backward: Option<Box<dyn Backward>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(value, requires_grad, backward, None)
    }

    fn push_node(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        backward: Option<Box<dyn Backward>>,
        param: Option<ParamId>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradient of the scalar `output` with respect to every recorded node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if out.requires_grad {
            slots[output.0] = Some(vec![1.0]);
        }
        for i in (0..=output.0).rev() {
            let Some(grad) = slots[i].take() else {
                continue;
            };
            if let Some(rule) = &self.nodes[i].backward {
                let (before, _) = slots.split_at_mut(i);
                let mut sink = GradSink {
                    slots: before,
                    tape: self,
                };
                rule.backward(self, Var(i), &grad, &mut sink);
            }
            slots[i] = Some(grad);
        }
        Ok(Gradients { slots })
    }
}

/// Write access to input gradient buffers during a backward step.
pub(crate) struct GradSink<'a> {
    slots: &'a mut [Option<Vec<f64>>],
    tape: &'a Tape,
}

impl GradSink<'_> {
    /// Zero-initialized gradient buffer for `v`, or `None` if `v` does not
    /// need a gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.tape.nodes[v.0].requires_grad {
            return None;
        }
        let numel = self.tape.nodes[v.0].value.numel();
        Some(
            self.slots[v.0]
                .get_or_insert_with(|| vec![0.0; numel])
                .as_mut_slice(),
        )
    }

    pub fn add(&mut self, v: Var, grad: &[f64]) {
        if let Some(slot) = self.slot(v) {
            debug_assert_eq!(slot.len(), grad.len());
            for (s, g) in slot.iter_mut().zip(grad) {
                *s += g;
            }
        }
    }

    pub fn wants(&self, v: Var) -> bool {
        self.tape.nodes[v.0].requires_grad
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, if it was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }

    /// Sums every parameter leaf's gradient into the store.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (node, slot) in tape.nodes.iter().zip(&self.slots) {
            if let (Some(id), Some(grad)) = (node.param, slot) {
                store.accumulate_grad(id, grad);
            }
        }
    }
}
