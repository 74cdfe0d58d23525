//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is a handle onto a graph node. Forward ops record their
//! parents and an adjoint closure; `backward()` replays the recorded graph in
//! exact reverse execution order and accumulates gradients into every
//! reachable `requires_grad` leaf. Data is flat row-major storage, f32 or f64
//! via the [`Scalar`](crate::scalar::Scalar) parameter.

mod ops;

pub use ops::concat;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::scalar::Scalar;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ON: Cell<bool> = const { Cell::new(true) };
    static CORRUPT_OP: RefCell<Option<String>> = const { RefCell::new(None) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` without recording any graph nodes (inference mode). Results are
/// detached: they carry values but no ancestry.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ON.with(|g| g.replace(false));
    let out = f();
    GRAD_ON.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ON.with(|g| g.get())
}

/// Test hook: makes the named op's adjoint deliberately wrong so the
/// finite-difference audit can prove it detects broken gradients.
#[doc(hidden)]
pub fn set_adjoint_corruption(op: Option<&str>) {
    CORRUPT_OP.with(|c| *c.borrow_mut() = op.map(str::to_string));
}

fn corruption_matches(op: &str) -> bool {
    CORRUPT_OP.with(|c| c.borrow().as_deref() == Some(op))
}

struct Node<S: Scalar> {
    parents: Vec<Tensor<S>>,
    backward: Box<dyn Fn(&[S])>,
}

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    requires_grad: bool,
    is_leaf: bool,
    grad: RefCell<Option<Vec<S>>>,
    node: RefCell<Option<Node<S>>>,
}

pub struct Tensor<S: Scalar>(Rc<Inner<S>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(shape.iter().all(|&d| d > 0), "tensor: zero dim in shape {shape:?}");
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            shape: shape.to_vec(),
            data: RefCell::new(data),
            requires_grad: false,
            is_leaf: true,
            grad: RefCell::new(None),
            node: RefCell::new(None),
        }))
    }

    /// Trainable leaf: gradients accumulate here during `backward()`.
    pub fn param(data: Vec<S>, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            shape: shape.to_vec(),
            data: RefCell::new(data),
            requires_grad: true,
            is_leaf: true,
            grad: RefCell::new(None),
            node: RefCell::new(None),
        }))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(vec![S::zero(); numel], shape)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(vec![v; numel], shape)
    }

    pub fn scalar(v: S) -> Self {
        Tensor::from_vec(vec![v], &[1])
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.is_leaf
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item: tensor has shape {:?}", self.shape());
        self.0.data.borrow()[0]
    }

    /// Overwrites the values in place (shape must match). Used by optimizers
    /// and replica synchronization; never recorded on the graph.
    pub fn set_data(&self, values: &[S]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(
            d.len(),
            values.len(),
            "set_data: length {} vs tensor numel {}",
            values.len(),
            d.len()
        );
        d.copy_from_slice(values);
    }

    pub fn map_data(&self, f: impl FnMut(&mut S)) {
        self.0.data.borrow_mut().iter_mut().for_each(f);
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Detached copy of the values: a fresh leaf with no ancestry.
    pub fn detach(&self) -> Tensor<S> {
        Tensor::from_vec(self.to_vec(), self.shape())
    }

    pub(crate) fn accum_grad_with(&self, numel: usize, f: impl FnOnce(&mut [S])) {
        let mut g = self.0.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![S::zero(); numel]);
        f(buf);
    }

    /// Records the result of an op. The adjoint closure receives the output
    /// gradient and accumulates into the (captured) parents. Nothing is
    /// recorded when grads are globally off or no parent needs them.
    pub(crate) fn record(
        op: &'static str,
        data: Vec<S>,
        shape: Vec<usize>,
        parents: Vec<Tensor<S>>,
        backward: impl Fn(&[S]) + 'static,
    ) -> Tensor<S> {
        let numel: usize = shape.iter().product();
        debug_assert_eq!(data.len(), numel);
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Tensor(Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad: false,
                is_leaf: false,
                grad: RefCell::new(None),
                node: RefCell::new(None),
            }));
        }
        let backward: Box<dyn Fn(&[S])> = if corruption_matches(op) {
            Box::new(move |g: &[S]| {
                let skewed: Vec<S> = g.iter().map(|&v| v + S::from_f64(0.125)).collect();
                backward(&skewed);
            })
        } else {
            Box::new(backward)
        };
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            shape,
            data: RefCell::new(data),
            requires_grad: true,
            is_leaf: false,
            grad: RefCell::new(None),
            node: RefCell::new(Some(Node { parents, backward })),
        }))
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable `requires_grad` tensor; the recorded graph is then freed, so
    /// a second call without re-running the forward pass is a contract error.
    pub fn backward(&self) {
        self.backward_impl(false)
    }

    /// As [`backward`](Self::backward) but keeps the graph alive.
    pub fn backward_retain(&self) {
        self.backward_impl(true)
    }

    fn backward_impl(&self, retain: bool) {
        assert_eq!(
            self.numel(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.shape()
        );
        assert!(
            self.0.requires_grad,
            "backward: loss does not depend on any requires_grad tensor"
        );
        if !self.0.is_leaf && self.0.node.borrow().is_none() {
            panic!("backward: graph already consumed; re-run the forward pass");
        }

        // Postorder DFS (children after parents), iterative to survive deep
        // chains from long training graphs.
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((t, child_idx)) = stack.pop() {
            let next = {
                let node = t.0.node.borrow();
                node.as_ref().and_then(|n| n.parents.get(child_idx).cloned())
            };
            match next {
                Some(p) => {
                    stack.push((t, child_idx + 1));
                    if visited.insert(p.0.id) {
                        stack.push((p, 0));
                    }
                }
                None => order.push(t),
            }
        }

        // Intermediate grads are per-sweep scratch; only leaves accumulate
        // across sweeps.
        for t in &order {
            if !t.0.is_leaf {
                t.0.grad.borrow_mut().take();
            }
        }
        self.accum_grad_with(1, |g| g[0] = S::one());
        for t in order.iter().rev() {
            let node = t.0.node.borrow();
            if let Some(node) = node.as_ref() {
                let grad = t.0.grad.borrow().clone().unwrap_or_else(|| vec![S::zero(); t.numel()]);
                (node.backward)(&grad);
            }
        }
        if !retain {
            for t in &order {
                t.0.node.borrow_mut().take();
                if !t.0.is_leaf {
                    // Intermediate grads are scratch space; drop them so only
                    // leaves keep accumulated gradients.
                    t.0.grad.borrow_mut().take();
                }
            }
            // The loss keeps its node slot empty; a repeat call trips the
            // consumed check above.
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let w = Tensor::<f64>::param(vec![1.0, -2.0, 3.0, 0.5], &[2, 2]);
        let loss = w.sum_all();
        loss.backward();
        assert_eq!(w.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn elementwise_square_gradient_is_two_w() {
        let w = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]);
        let loss = w.mul(&w).sum_all();
        loss.backward();
        assert_eq!(w.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn backward_rejects_non_scalar_loss() {
        let w = Tensor::<f64>::param(vec![1.0, 2.0], &[2]);
        let y = w.relu();
        y.backward();
    }

    #[test]
    #[should_panic(expected = "graph already consumed")]
    fn backward_twice_without_reexecution_is_an_error() {
        let w = Tensor::<f64>::param(vec![1.0, 2.0], &[2]);
        let loss = w.sum_all();
        loss.backward();
        loss.backward();
    }

    #[test]
    fn backward_retain_allows_second_sweep() {
        let w = Tensor::<f64>::param(vec![3.0], &[1]);
        let loss = w.mul(&w).sum_all();
        loss.backward_retain();
        assert_eq!(w.grad().unwrap(), vec![6.0]);
        loss.backward_retain();
        assert_eq!(w.grad().unwrap(), vec![12.0]); // accumulates
    }

    #[test]
    fn no_grad_detaches_results() {
        let w = Tensor::<f64>::param(vec![1.0, 2.0], &[2]);
        let y = no_grad(|| w.relu().sum_all());
        assert!(!y.requires_grad());
    }

    #[test]
    fn shared_subexpression_accumulates_both_paths() {
        // loss = sum(w + w) -> grad 2 per element
        let w = Tensor::<f64>::param(vec![1.0, 2.0], &[2]);
        let loss = w.add(&w).sum_all();
        loss.backward();
        assert_eq!(w.grad().unwrap(), vec![2.0, 2.0]);
    }
}
