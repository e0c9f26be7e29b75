//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) to a node holding its values, an
//! optional gradient, and, when recording is enabled and some input requires a
//! gradient, the operation that produced it. Calling [`Tensor::backward`] on a
//! scalar walks the recorded graph once in reverse topological order and
//! accumulates gradients into every reachable node.
//!
//! Recording is off for nodes whose inputs do not require gradients, and can be
//! switched off globally for a scope with [`no_grad`]. Unrecorded outputs keep
//! no reference to their inputs, so inference passes free intermediates as they
//! go.

mod gemm;
mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Error, Result};

pub(crate) use ops::Op;
pub use ops::{Activation, IGNORE_INDEX};

/// Floating point element type. `f32` is used for training, `f64` for
/// finite-difference gradient checks.
pub trait Real: Float + FromPrimitive + ToPrimitive + fmt::Debug + fmt::Display + Default + Sum + 'static {
    const DTYPE: &'static str;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on this thread.
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

pub(crate) struct Node<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    op: Option<Op<T>>,
}

#[derive(Clone)]
pub struct Tensor<T: Real>(Rc<Node<T>>);

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.0.op.as_ref().map(|o| o.name()))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        let record = grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(record),
            op: record.then_some(op),
        }))
    }

    fn leaf(data: Vec<T>, shape: Vec<usize>) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(false),
            op: None,
        }))
    }

    /// Creates a leaf tensor; fails unless `data.len()` equals the product of
    /// `shape`.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err("new", format!("zero extent in {shape:?}")));
        }
        if data.len() != numel(shape) {
            return Err(shape_err("new", format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self::leaf(data, shape.to_vec()))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(vec![value; numel(shape)], shape.to_vec())
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], vec![1])
    }

    /// Marks a leaf as requiring gradients (builder style).
    pub fn with_grad(self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.set(on);
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn last_dim(&self) -> usize {
        *self.0.shape.last().expect("tensors have at least one dimension")
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Only meaningful for leaves (parameters
    /// and inputs); recorded ops keep their own saved state.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.f64()).collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.shape());
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Replaces the stored gradient (used by optimizers and tests).
    pub fn set_grad(&self, g: Vec<T>) -> Result<()> {
        if g.len() != self.numel() {
            return Err(shape_err(
                "set_grad",
                format!("{} values for shape {:?}", g.len(), self.shape()),
            ));
        }
        *self.0.grad.borrow_mut() = Some(g);
        Ok(())
    }

    /// Multiplies the stored gradient, if any, by `c`.
    pub fn scale_grad(&self, c: T) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = *v * c);
        }
    }

    /// A new leaf sharing no history with `self`.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.0.shape.clone())
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode differentiation from a scalar.
    ///
    /// Gradients accumulate into `grad` of every reachable tensor that
    /// requires one; call [`Tensor::zero_grad`] on leaves between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        self.accumulate_grad(&[T::one()]);
        for node in self.topo_order().into_iter().rev() {
            let Some(op) = node.0.op.as_ref() else {
                continue;
            };
            let grad = match node.0.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let data = node.0.data.borrow();
            op.backward(&data, &grad, &node.0.shape)?;
        }
        Ok(())
    }

    /// Post-order over recorded nodes; each op appears exactly once.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.0.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = t.0.op.as_ref() {
                for input in op.inputs() {
                    if input.requires_grad() && !seen.contains(&input.0.id) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}
