//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value plus an optional record of the
//! operation that produced it. Calling [`Tensor::backward`] on a scalar walks
//! that record in reverse topological order and fills the gradient buffer of
//! every reachable tensor that requires a gradient.
//!
//! Gradient buffers are the only mutable state; they sit behind a mutex so
//! tensors can be shared across threads.

mod conv;
mod gradcheck;
mod linalg;
mod nn_ops;
mod ops;
mod resize;
mod scalar;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use conv::conv_output_size;
pub use gradcheck::{gradcheck, gradcheck_sampled, GradCheckReport, FD_STEP};
pub use linalg::kernel_threads;
pub use nn_ops::CrossEntropy;
pub use scalar::{DType, Scalar};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward graph on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Inputs handed to a backward rule.
pub struct BackwardArgs<'a, T: Scalar> {
    pub parents: &'a [Tensor<T>],
    pub output: &'a [T],
    pub output_shape: &'a [usize],
    pub grad: &'a [T],
}

/// A backward rule returns one optional gradient per parent, each with the
/// parent's element count. `None` means "no contribution".
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Scalar> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

#[derive(Clone)]
pub struct Tensor<T: Scalar>(Arc<Inner<T>>);

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape)
            .field("op", &self.op_name())
            .field("requires_grad", &self.0.requires_grad);
        if self.numel() <= 16 {
            d.field("data", &self.0.data);
        }
        d.finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Leaf tensor without gradient tracking.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {} elements, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates a gradient during backward.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Ok(Self::new(shape, data)?.with_requires_grad(true))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::c(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self::build(Vec::new(), vec![v], false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::build(shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::c(StandardNormal.sample(rng)))
            .collect();
        Self::build(shape.to_vec(), data, false, None)
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::c(rng.random_range(lo..hi)))
            .collect();
        Self::build(shape.to_vec(), data, false, None)
    }

    /// Returns a leaf copy of this tensor with the given gradient flag.
    pub fn with_requires_grad(self, requires_grad: bool) -> Self {
        let (shape, data) = match Arc::try_unwrap(self.0) {
            Ok(inner) => (inner.shape, inner.data),
            Err(shared) => (shared.shape.clone(), shared.data.clone()),
        };
        Self::build(shape, data, requires_grad, None)
    }

    /// Same values, cut off from the backward graph.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Records an operation. The node is attached only when gradient
    /// recording is enabled and at least one parent requires a gradient.
    pub fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let node = track.then(|| Node {
            op,
            parents,
            backward,
        });
        Self::build(shape, data, track, node)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.0.node.as_ref().map_or("leaf", |n| n.op)
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().unwrap() = None;
    }

    fn accumulate_grad(&self, g: Vec<T>) {
        let mut slot = self.0.grad.lock().unwrap();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
            None => *slot = Some(g),
        }
    }

    /// Tensors of the backward graph in forward (topological) order.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
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
                for p in node.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Backpropagates from this scalar. Gradients accumulate into the
    /// buffers of every reachable tensor that requires a gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarBackward(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            if let Some(node) = &t.0.node {
                let grads = (node.backward)(&BackwardArgs {
                    parents: &node.parents,
                    output: t.data(),
                    output_shape: t.shape(),
                    grad: &g,
                });
                debug_assert_eq!(grads.len(), node.parents.len(), "{}", node.op);
                for (p, pg) in node.parents.iter().zip(grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel(), "{} gradient size", node.op);
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
            t.accumulate_grad(g);
        }
        Ok(())
    }

    /// First tensor, in forward order, holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(String, Vec<usize>)> {
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
                for p in node.parents.iter().rev() {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
            .into_iter()
            .find(|t| t.data().iter().any(|v| !v.is_finite()))
            .map(|t| (t.op_name().to_string(), t.shape().to_vec()))
    }

    /// Converts to another precision as a fresh leaf.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::c(v.as_f64())).collect();
        Tensor::build(self.shape().to_vec(), data, false, None)
    }
}
