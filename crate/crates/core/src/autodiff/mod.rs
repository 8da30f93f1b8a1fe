//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] then walks the records in reverse and
//! returns a [`Gradients`] table. Parameters live in a
//! [`ParamStore`](crate::params::ParamStore); binding one onto a tape with
//! [`Tape::param`] lets the gradients be accumulated back into the store.
//!
//! A tape is single-threaded. Create one per forward pass and drop it before
//! the optimizer step.

mod ops;

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub use ops::pairwise_sq_distance;

/// Backward rule: maps the output gradient to one optional gradient per
/// parent. The mask says which parents need one.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Ordered record of operations.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    bindings: RefCell<Vec<(ParamId, usize)>>,
    track_params: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Tape on which trainable parameters require gradients.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(Vec::new()),
            track_params: true,
        }
    }

    /// Tape on which parameters are constants. Inputs created with
    /// [`Tape::leaf`] still get gradients, which is what input-gradient
    /// attacks need.
    pub fn frozen() -> Self {
        Tape {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(value), false)
    }

    /// Differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(value), true)
    }

    /// Binds a stored parameter onto the tape.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let entry = store.entry(id);
        let requires_grad = self.track_params && entry.trainable;
        let var = self.push_leaf(entry.value.clone(), requires_grad);
        if requires_grad {
            self.bindings.borrow_mut().push((id, var.id));
        }
        var
    }

    fn push_leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an operation result. The backward rule is dropped when no
    /// parent requires a gradient.
    pub fn push(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: BackwardFn<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let parent_ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = parent_ids.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            parents: if requires_grad { parent_ids } else { Vec::new() },
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let shape = loss.shape();
        if loss.value().numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_with(loss, Tensor::ones(shape))
    }

    /// Reverse pass seeded with an arbitrary output gradient (a
    /// vector-Jacobian product).
    pub fn backward_with(&self, root: Var<'_, T>, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != root.value().shape() {
            return Err(Error::shape("backward seed", seed.shape(), root.value().shape()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(seed);
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &needed) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let Some(pg) = pg else { continue };
                if !needed {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape of node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of leaves produced by one reverse pass.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, if it was reached.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Adds the gradients of every parameter bound on `tape` into `store`.
    pub fn accumulate_into(&self, tape: &Tape<T>, store: &mut ParamStore<T>) {
        for &(pid, node) in tape.bindings.borrow().iter() {
            if let Some(Some(g)) = self.grads.get(node) {
                store.accumulate_grad(pid, g);
            }
        }
    }
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}
