//! Reverse-mode autodiff tensor.
//!
//! A `Tensor` is a reference-counted node in a dynamically recorded DAG.
//! Forward ops (see `ops`) build nodes carrying a backward closure that maps
//! the node's output gradient to gradients for each parent. `backward()`
//! walks the DAG in reverse topological order and accumulates gradients
//! into every reachable `requires_grad` leaf.
//!
//! Graphs are per-thread (`Rc`); heavy ops parallelize internally instead.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` with gradient recording disabled (inference / evaluation).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Backward closure: output gradient -> one gradient buffer per parent.
pub(crate) type BackFn<T> = Box<dyn Fn(&[T]) -> Vec<Vec<T>>>;

pub(crate) struct Node<T: Scalar> {
    pub id: usize,
    pub shape: Vec<usize>,
    pub data: RefCell<Vec<T>>,
    pub grad: RefCell<Option<Vec<T>>>,
    pub requires_grad: bool,
    pub parents: Vec<Tensor<T>>,
    pub backward: Option<BackFn<T>>,
}

/// Dense N-dimensional array with an optional gradient slot.
pub struct Tensor<T: Scalar> {
    pub(crate) node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self::leaf(shape, data, false))
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackFn<T>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        // Record only when enabled and some parent participates in a gradient.
        if grad_enabled() && parents.iter().any(|p| p.needs_grad()) {
            Tensor {
                node: Rc::new(Node {
                    id: next_id(),
                    shape,
                    data: RefCell::new(data),
                    grad: RefCell::new(None),
                    requires_grad: false,
                    parents,
                    backward: Some(backward),
                }),
            }
        } else {
            Self::leaf(shape, data, false)
        }
    }

    /// Trainable leaf.
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self::leaf(shape, data, true)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape, vec![T::zero(); n], false)
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape, vec![v; n], false)
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(vec![1], vec![v], false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// True if gradients must flow through this node.
    pub fn needs_grad(&self) -> bool {
        self.node.requires_grad || self.node.backward.is_some()
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.node.data.borrow()[0]
    }

    /// Overwrite the stored values (optimizer step). Shape must match.
    pub fn set_data(&self, new: &[T]) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), new.len());
        d.copy_from_slice(new);
    }

    /// Mutate the stored values in place.
    pub fn with_data_mut(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.node.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// A gradient-isolated copy of this tensor's values.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.shape.clone(), self.to_vec(), false)
    }

    /// Reverse pass from a scalar root. Accumulates into `grad` of every
    /// reachable `requires_grad` leaf (summing across repeated calls).
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() requires a scalar root");

        // Iterative DFS for reverse topological order.
        let mut order: Vec<Rc<Node<T>>> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Rc<Node<T>>, usize)> = vec![(Rc::clone(&self.node), 0)];
        visited.insert(self.node.id, ());
        while let Some((node, pi)) = stack.pop() {
            if pi < node.parents.len() {
                let parent = Rc::clone(&node.parents[pi].node);
                stack.push((node, pi + 1));
                if parent.backward.is_some() || parent.requires_grad {
                    if visited.insert(parent.id, ()).is_none() {
                        stack.push((parent, 0));
                    }
                }
            } else {
                order.push(node);
            }
        }
        // `order` is now topological (parents before children); walk reversed.
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.node.id, vec![T::one()]);

        for node in order.iter().rev() {
            let Some(gout) = grads.remove(&node.id) else { continue };
            if node.requires_grad {
                let mut slot = node.grad.borrow_mut();
                match slot.as_mut() {
                    Some(g) => {
                        for (a, b) in g.iter_mut().zip(&gout) {
                            *a += *b;
                        }
                    }
                    None => *slot = Some(gout.clone()),
                }
            }
            if let Some(back) = &node.backward {
                let pgrads = back(&gout);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (parent, pg) in node.parents.iter().zip(pgrads) {
                    if !parent.needs_grad() || pg.is_empty() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.numel());
                    match grads.entry(parent.node.id) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, b) in e.get_mut().iter_mut().zip(&pg) {
                                *a += *b;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(pg);
                        }
                    }
                }
            }
        }
    }
}
