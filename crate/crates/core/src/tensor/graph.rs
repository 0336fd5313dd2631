use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Values visible to a backward rule: the upstream gradient, the forward output and
/// the forward inputs, in the order they were passed to [`Graph::record`].
pub(crate) struct BackwardArgs<'a, T> {
    pub grad: &'a [T],
    pub out: &'a Tensor<T>,
    pub inputs: &'a [Rc<Tensor<T>>],
}

impl<T> BackwardArgs<'_, T> {
    pub fn input(&self, i: usize) -> &Tensor<T> {
        &self.inputs[i]
    }
}

/// Per-input gradient contributions; `None` for inputs that receive nothing.
pub(crate) type Contributions<T> = Vec<Option<Vec<T>>>;
type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Contributions<T>>;

struct Node<T> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// A dynamic tape: every operation applied to a [`Var`] appends one node, and
/// [`Graph::backward`] walks the nodes in reverse insertion order, which is a
/// reverse topological order of the computation.
pub struct Graph<T = f64> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to a value recorded on a [`Graph`].
pub struct Var<'g, T = f64> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that does not take part in differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    /// Records the result of an operation. Non-finite outputs are rejected here, so
    /// every operation reports NaN/Inf as an error rather than propagating it.
    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: impl Fn(&BackwardArgs<'_, T>) -> Contributions<T> + 'static,
    ) -> Result<Var<'_, T>> {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("forward {op}"),
                index,
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| {
            debug_assert!(std::ptr::eq(p.graph, self), "var from another graph");
            nodes[p.id].requires_grad
        });
        nodes.push(Node {
            op,
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse-mode sweep from a one-element `root`. Gradients are accumulated by
    /// addition in a fixed order, so repeated runs are bit-identical.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", nodes[root.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![T::ONE]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor<T>>> =
                node.parents.iter().map(|&p| Rc::clone(&nodes[p].value)).collect();
            let contributions = backward(&BackwardArgs {
                grad: &grad,
                out: &node.value,
                inputs: &inputs,
            });
            debug_assert_eq!(contributions.len(), node.parents.len(), "{}", node.op);
            for (&parent, contribution) in node.parents.iter().zip(contributions) {
                let Some(contribution) = contribution else {
                    continue;
                };
                if !nodes[parent].requires_grad {
                    continue;
                }
                if let Some(index) = contribution.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("backward {} -> {}", node.op, nodes[parent].op),
                        index,
                    });
                }
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += *c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| {
                let g = g.filter(|_| node.parents.is_empty() && node.requires_grad)?;
                Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> fmt::Debug for Gradients<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gradients")
            .field("leaves", &self.grads.iter().filter(|g| g.is_some()).count())
            .finish()
    }
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `var`. `None` when `var` is not a
    /// gradient-tracking leaf; a zero tensor when it is but the root does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let shape = var.shape();
        match self.grads.get(var.id) {
            Some(Some(g)) => Some(g.clone()),
            _ if var.requires_grad() && var.is_leaf() => Some(Tensor::zeros(shape)),
            _ => None,
        }
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn is_leaf(&self) -> bool {
        self.graph.nodes.borrow()[self.id].parents.is_empty()
    }

    /// Detached copy of the current value.
    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value()).clone()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }
}
