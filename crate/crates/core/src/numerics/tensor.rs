//! Reverse-mode differentiable n-dimensional arrays.
//!
//! A [`Tensor`] is an immutable row-major `f64` buffer. When any input of an
//! operation requires a gradient, the output records the operation and its
//! inputs so that [`Tensor::backward`] can walk the graph in reverse
//! topological order and accumulate exact gradients into the leaves.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::TensorError;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether new operations are currently recorded for differentiation.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

/// The vector-Jacobian product of one recorded operation.
pub trait BackwardOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, in input order. `None` means the
    /// input receives no gradient from this operation.
    fn backward(&self, inputs: &[Tensor], output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    inputs: Vec<Tensor>,
    op: Box<dyn BackwardOp>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

/// Summary of one backward traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    pub ops_visited: usize,
    pub leaves_reached: usize,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            node,
        }))
    }

    /// A constant (non-differentiable) tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        if numel(shape) != data.len() {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape: shape.to_vec(),
                reason: format!("expected {} elements, got {}", numel(shape), data.len()),
            });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// A leaf tensor that accumulates a gradient during backward passes.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let t = Self::new(shape, data)?;
        Ok(Self::build(t.0.shape.clone(), t.0.data.clone(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![], vec![value], false, None)
    }

    /// Creates the output of a differentiable operation. The node is only
    /// recorded when recording is enabled and some input requires a gradient.
    pub fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        op: impl BackwardOp + 'static,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = track.then(|| Node { inputs, op: Box::new(op) });
        Self::build(shape, data, track, node)
    }

    /// Copy of this tensor's values detached from any graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Name of the operation that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op.name())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    fn accumulate(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Back-propagates from a scalar output with seed 1.
    pub fn backward(&self) -> Result<BackwardStats, TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward(self.shape().to_vec()));
        }
        self.backward_with(&[1.0])
    }

    /// Back-propagates an arbitrary output cotangent `seed`.
    pub fn backward_with(&self, seed: &[f64]) -> Result<BackwardStats, TensorError> {
        if seed.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: self.shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        let mut stats = BackwardStats { ops_visited: 0, leaves_reached: 0 };
        if !self.requires_grad() {
            return Ok(stats);
        }
        let order = self.topological_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), seed.to_vec());
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else { continue };
            match &t.0.node {
                None => {
                    t.accumulate(&g);
                    stats.leaves_reached += 1;
                }
                Some(node) => {
                    stats.ops_visited += 1;
                    let grads = node.op.backward(&node.inputs, &t.0.data, &g);
                    debug_assert_eq!(grads.len(), node.inputs.len(), "{}", node.op.name());
                    for (input, ig) in node.inputs.iter().zip(grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel(), "{}", node.op.name());
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(input.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(stats)
    }

    /// Post-order over the differentiable subgraph (inputs before outputs).
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in &node.inputs {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diamond_graph_visits_each_op_once() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let a = x.mul(&x).unwrap();
        let b = a.add(&a).unwrap();
        let s = b.sum_all();
        let stats = s.backward().unwrap();
        assert_eq!(stats.ops_visited, 3);
        assert_eq!(stats.leaves_reached, 1);
        // d/dx 2x^2 = 4x
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
        assert!(grad_enabled());
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(matches!(y.backward(), Err(TensorError::NonScalarBackward(_))));
    }

    #[test]
    fn gradients_accumulate_across_passes() {
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        for _ in 0..2 {
            x.mul(&x).unwrap().sum_all().backward().unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }
}
