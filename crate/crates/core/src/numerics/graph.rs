//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and a backward
//! rule. Node ids are assigned in creation order, so walking the tape in
//! reverse visits every node after all of its consumers.

use std::cell::RefCell;
use std::rc::Rc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Backward rule: given the upstream gradient and which parents need a
/// gradient, returns one optional gradient per parent.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    needs_grad: bool,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            needs_grad: true,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            needs_grad: false,
        })
    }

    pub fn leaf(&self, value: Tensor<T>, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Records an operation with a caller-supplied backward rule.
    ///
    /// The forward value must be finite; otherwise the op name is reported
    /// in a [`Error::NonFinite`].
    pub fn record(
        &self,
        op: &'static str,
        parents: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var> {
        value.check_finite(op)?;
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].needs_grad)
        };
        Ok(self.push(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            backward: if needs_grad { Some(Box::new(backward)) } else { None },
            needs_grad,
        }))
    }

    /// Reverse pass from a one-element root. Returns gradients for every
    /// leaf created with [`Graph::param`] that the root depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", root_node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_node.value.shape().to_vec(), T::one()));

        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let wants: Vec<bool> = node.parents.iter().map(|p| nodes[p.0].needs_grad).collect();
            let parent_grads = rule(&upstream, &wants);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((parent, want), g) in node.parents.iter().zip(&wants).zip(parent_grads) {
                if !want {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[parent.0] {
                    Some(acc) => acc.axpy(T::one(), &g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if node.backward.is_some() || !node.needs_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the root.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.take(v).unwrap_or_else(|| like.zeros_like())
    }
}
