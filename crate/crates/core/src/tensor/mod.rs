//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a handle to an immutable node in a computation graph:
//! shape, row-major data, and (for nodes built from gradient-requiring
//! inputs) the parent handles plus a backward closure. Calling
//! [`Tensor::backward`] on a scalar output walks the graph once in reverse
//! topological order and accumulates gradients into every node that requires
//! them; leaf gradients are then read back by the optimizer.
//!
//! Ops that consume only gradient-free inputs produce detached nodes with no
//! parents, so inference builds no graph. Gradient accumulation is
//! single-threaded by design: one graph, one backward pass, deterministic
//! float summation order.

mod ops;

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S]) -> Vec<Option<Vec<S>>>>;

pub(crate) struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
}

/// Handle to a graph node. Cloning is cheap (reference count bump) and both
/// handles see the same value and gradient.
pub struct Tensor<S: Scalar> {
    pub(crate) node: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    /// Gradient-free constant tensor.
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Leaf node; `requires_grad` marks it as a gradient sink (a parameter).
    pub fn leaf(shape: &[usize], data: Vec<S>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::from_parts(
            shape.to_vec(),
            Arc::new(data),
            requires_grad,
        ))
    }

    /// Leaf sharing an existing value buffer (parameters are stored once and
    /// re-wrapped every step without copying).
    pub fn leaf_shared(shape: &[usize], data: Arc<Vec<S>>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data, requires_grad))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), Arc::new(vec![S::zero(); numel]), false)
    }

    pub fn scalar(v: S) -> Self {
        Self::from_parts(vec![1], Arc::new(vec![v]), false)
    }

    fn from_parts(shape: Vec<usize>, data: Arc<Vec<S>>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Internal op constructor. Drops parents and the backward closure when no
    /// parent requires gradients, so eval-mode forward passes stay graph-free.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires = parents.iter().any(|p| p.node.requires_grad);
        Tensor {
            node: Rc::new(Node {
                shape,
                data: Arc::new(data),
                grad: RefCell::new(None),
                requires_grad: requires,
                parents: if requires { parents } else { Vec::new() },
                backward: if requires { Some(backward) } else { None },
            }),
        }
    }

    /// Like [`Tensor::from_op`] but shares the value buffer instead of taking
    /// a fresh one (reshape and softmax reuse storage this way).
    pub(crate) fn from_op_arc(
        shape: Vec<usize>,
        data: Arc<Vec<S>>,
        parents: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires = parents.iter().any(|p| p.node.requires_grad);
        Tensor {
            node: Rc::new(Node {
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad: requires,
                parents: if requires { parents } else { Vec::new() },
                backward: if requires { Some(backward) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.node.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.node.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.borrow().clone()
    }

    /// Error if any element is NaN or infinite. NaN is a detectable state,
    /// never a silent one; call this at loss and gradient boundaries.
    pub fn assert_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.node.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("{context} (element {i} = {v})"),
                });
            }
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar output. Gradients accumulate into
    /// every reachable node that requires them; leaves keep theirs for the
    /// optimizer to read.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarBackward {
                shape: self.node.shape.clone(),
            });
        }
        *self.node.grad.borrow_mut() = Some(vec![S::one()]);
        let order = self.topo_order();
        // `order` is post-order (leaves first, root last); reversed, every
        // node is processed after all of its consumers.
        for t in order.iter().rev() {
            let Some(back) = &t.node.backward else {
                continue;
            };
            let parts = {
                let g = t.node.grad.borrow();
                let Some(g) = g.as_deref() else { continue };
                back(g)
            };
            debug_assert_eq!(parts.len(), t.node.parents.len());
            for (parent, part) in t.node.parents.iter().zip(parts) {
                let Some(part) = part else { continue };
                if !parent.node.requires_grad {
                    continue;
                }
                debug_assert_eq!(part.len(), parent.numel());
                let mut slot = parent.node.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&part) {
                            *a = *a + *b;
                        }
                    }
                    None => *slot = Some(part),
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node<S>> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            let ptr = Rc::as_ptr(&t.node);
            if !visited.insert(ptr) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.node.parents {
                if p.node.requires_grad && !visited.contains(&Rc::as_ptr(&p.node)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
