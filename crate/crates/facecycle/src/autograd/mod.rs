//! Reverse-mode automatic differentiation over dynamically shaped `f32` tensors.
//!
//! A [`Tape`] owns every value produced during one forward pass. Each
//! operation pushes a node holding its result plus a closure that maps the
//! node's upstream gradient to contributions for its parents. Nodes are
//! created in topological order, so [`Tape::backward`] simply replays the
//! closures in reverse creation order and accumulates gradients in a
//! [`GradStore`].
//!
//! Values are reference counted: a backward closure retains exactly the
//! arrays it needs without copying. Gradients of interior nodes are dropped
//! as soon as they have been consumed, which keeps peak memory proportional
//! to the widest layer rather than the whole graph.
//!
//! Nodes whose inputs all have `needs_grad == false` are stored as plain
//! constants with no closure, so frozen subnetworks cost a forward pass only.

use ndarray::ArrayD;
use std::rc::Rc;

pub mod ops;

/// Handle to a value on a [`Tape`]. Cheap to copy; only valid for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&ArrayD<f32>, &mut GradStore)>;

struct Node {
    value: Rc<ArrayD<f32>>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

/// Records one forward pass and computes gradients on demand.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf value. Set `needs_grad` for trainable parameters and for
    /// inputs whose gradient is requested by a gradient check.
    pub fn leaf(&mut self, value: ArrayD<f32>, needs_grad: bool) -> Var {
        self.push(Rc::new(value), needs_grad, None)
    }

    /// Insert a value that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<f32>) -> Var {
        self.leaf(value, false)
    }

    /// Insert an already reference-counted leaf without copying.
    pub fn leaf_rc(&mut self, value: Rc<ArrayD<f32>>, needs_grad: bool) -> Var {
        self.push(value, needs_grad, None)
    }

    pub(crate) fn push(
        &mut self,
        value: Rc<ArrayD<f32>>,
        needs_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            backward: if needs_grad { backward } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Register an op node. `backward` is dropped when no parent requires a
    /// gradient, so callers may build the closure unconditionally.
    pub(crate) fn push_op(
        &mut self,
        value: ArrayD<f32>,
        parents_need_grad: bool,
        backward: BackwardFn,
    ) -> Var {
        self.push(Rc::new(value), parents_need_grad, Some(backward))
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f32> {
        &self.nodes[v.0].value
    }

    /// Reference-counted handle to a value, for capture in backward closures.
    pub fn value_rc(&self, v: Var) -> Rc<ArrayD<f32>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Extract a 0-dimensional value as `f32`. Panics if not a scalar.
    pub fn scalar(&self, v: Var) -> f32 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on non-scalar value");
        val.iter().copied().next().unwrap()
    }

    /// Run backpropagation from a scalar root and return the gradient store.
    /// Interior gradients are freed as soon as they have been propagated;
    /// leaf gradients remain available for extraction.
    pub fn backward(&self, root: Var) -> GradStore {
        let root_val = self.value(root);
        assert_eq!(root_val.len(), 1, "backward() requires a scalar root");
        assert!(
            self.nodes[root.0].needs_grad,
            "backward() root does not depend on any gradient-requiring leaf"
        );
        let mut store = GradStore {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            needs: self.nodes.iter().map(|n| n.needs_grad).collect(),
        };
        store.grads[root.0] = Some(ArrayD::ones(root_val.raw_dim()));
        for id in (0..=root.0).rev() {
            if let Some(back) = &self.nodes[id].backward {
                if let Some(grad) = store.grads[id].take() {
                    back(&grad, &mut store);
                }
            }
        }
        store
    }
}

/// Gradient accumulator indexed by [`Var`]. Contributions to variables that
/// do not require a gradient are silently discarded.
pub struct GradStore {
    grads: Vec<Option<ArrayD<f32>>>,
    needs: Vec<bool>,
}

impl GradStore {
    /// Add a gradient contribution for `v`.
    pub fn accumulate(&mut self, v: Var, contribution: ArrayD<f32>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), contribution.shape());
                *existing += &contribution;
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Whether a contribution for `v` would be kept. Lets expensive backward
    /// kernels skip work for frozen parents.
    pub fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Remove and return the gradient of `v`, if any was accumulated.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<f32>> {
        self.grads[v.0].take()
    }

    pub fn get(&self, v: Var) -> Option<&ArrayD<f32>> {
        self.grads[v.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn leaf_and_scalar_roundtrip() {
        let mut tape = Tape::new();
        let v = tape.leaf(arr1(&[2.5f32]).into_dyn(), false);
        assert_eq!(tape.value(v).len(), 1);
        assert!(!tape.needs_grad(v));
    }

    #[test]
    fn backward_accumulates_over_shared_parent() {
        // y = x + x  =>  dy/dx = 2
        let mut tape = Tape::new();
        let x = tape.leaf(ndarray::arr0(3.0f32).into_dyn(), true);
        let y = ops::add(&mut tape, x, x);
        let grads = tape.backward(y);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.iter().copied().next().unwrap(), 2.0);
    }

    #[test]
    fn constant_branch_receives_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(ndarray::arr0(3.0f32).into_dyn(), true);
        let c = tape.constant(ndarray::arr0(4.0f32).into_dyn());
        let y = ops::add(&mut tape, x, c);
        let grads = tape.backward(y);
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }
}
