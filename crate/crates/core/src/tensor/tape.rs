use std::collections::HashMap;

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes only ever reference earlier nodes, so append order is a valid
/// topological order and the backward sweep is a single reverse scan.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    bound: HashMap<(u64, ParamId), Var>,
}

/// Gradients produced by [`Tape::backward`], retained for leaf nodes.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is retained by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Bind a parameter. Binding the same parameter twice returns the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&var) = self.bound.get(&key) {
            return var;
        }
        let var = self.input(store.get(id).value.clone());
        self.bound.insert(key, var);
        var
    }

    /// Same value, cut off from the graph.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        debug_assert!(value.is_finite(), "non-finite output from {}", op.name());
        self.push_raw(value, op, requires_grad)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = self.value(loss);
        if value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Reverse sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, output: Var, seed: Vec<f32>) -> Result<Gradients> {
        if seed.len() != self.value(output).numel() {
            return Err(Error::Contract(format!(
                "seed gradient has {} values for output of shape {:?}",
                seed.len(),
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for index in (0..=output.0).rev() {
            let node = &self.nodes[index];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad_out) = grads[index].take() else {
                continue;
            };
            node.op.backward(self, &node.value, &grad_out, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Backward from `loss` and add parameter gradients into `stores`.
    ///
    /// Parameters of other stores bound on this tape are left untouched.
    pub fn backward_into(&self, loss: Var, stores: &mut [&mut ParamStore]) -> Result<()> {
        let mut grads = self.backward(loss)?;
        for store in stores.iter_mut() {
            self.accumulate_into(&mut grads, store);
        }
        Ok(())
    }

    pub fn accumulate_into(&self, grads: &mut Gradients, store: &mut ParamStore) {
        let uid = store.uid();
        let mut bindings: Vec<(ParamId, Var)> = self
            .bound
            .iter()
            .filter(|((owner, _), _)| *owner == uid)
            .map(|(&(_, id), &var)| (id, var))
            .collect();
        bindings.sort();
        for (id, var) in bindings {
            let numel = self.value(var).numel();
            let grad = grads.take(var).unwrap_or_else(|| vec![0.0; numel]);
            store.accumulate_grad(id, &grad);
        }
    }
}

/// Add `grad` into the slot for `var`, allocating on first touch.
pub(crate) fn accumulate(grads: &mut [Option<Vec<f32>>], var: Var, grad: Vec<f32>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, g) in existing.iter_mut().zip(grad) {
                *e += g;
            }
        }
        slot @ None => *slot = Some(grad),
    }
}
