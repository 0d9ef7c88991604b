//! Recording tape and reverse pass.
//!
//! Every operation on a [`Var`] appends one node to its [`Tape`]. Nodes are
//! stored in recording order, which is a valid topological order, so the
//! reverse pass simply walks the node list backwards once.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) struct BackwardArgs<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [T],
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    /// Which inputs take part in differentiation.
    pub needs: &'a [bool],
}

/// Returns one gradient per input, `None` where `needs[i]` is false.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of operations for one forward pass.
///
/// A tape is single-threaded; use one tape per worker.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    kinks: Option<RefCell<Vec<bool>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            kinks: None,
            check_finite: false,
        }
    }

    /// Records the activation pattern of every non-smooth op so that two
    /// evaluations can be compared for kink crossings.
    pub fn with_kink_tracking(mut self) -> Self {
        self.kinks = Some(RefCell::new(Vec::new()));
        self
    }

    /// Panics as soon as any recorded value is NaN or infinite.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
        if let Some(k) = &mut self.kinks {
            k.get_mut().clear();
        }
    }

    /// Puts a copy of `tensor` on the tape; it participates in
    /// differentiation iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        let requires_grad = tensor.requires_grad();
        let value = tensor.clone().with_requires_grad(false);
        self.push_leaf(value, requires_grad)
    }

    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(tensor.with_requires_grad(false), false)
    }

    pub fn variable(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(tensor.with_requires_grad(false), true)
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.check(&value, "leaf");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn check(&self, value: &Tensor<T>, op: &str) {
        if self.check_finite && !value.is_finite() {
            panic!("non-finite value produced by `{op}` (shape {:?})", value.shape());
        }
    }

    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        for p in parents {
            assert!(std::ptr::eq(p.tape, self), "`{op}`: operands live on different tapes");
        }
        self.check(&value, op);
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Runs `f` with shared access to the values of `vars`.
    pub(crate) fn with_values<R>(&self, vars: &[Var<'_, T>], f: impl FnOnce(&[&Tensor<T>]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let values: Vec<&Tensor<T>> = vars.iter().map(|v| &nodes[v.id].value).collect();
        f(&values)
    }

    pub(crate) fn record_kinks(&self, pattern: impl Iterator<Item = bool>) {
        if let Some(k) = &self.kinks {
            k.borrow_mut().extend(pattern);
        }
    }

    pub(crate) fn tracks_kinks(&self) -> bool {
        self.kinks.is_some()
    }

    /// Activation pattern of all non-smooth ops recorded so far (empty
    /// unless kink tracking is on).
    pub fn kink_signature(&self) -> Vec<bool> {
        self.kinks.as_ref().map(|k| k.borrow().clone()).unwrap_or_default()
    }

    /// Reverse pass from a one-element `loss`.
    ///
    /// Each node is visited exactly once, in reverse recording order;
    /// gradients from multiple uses of a value add up.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Usage("loss was recorded on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &nodes[p].value).collect();
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let parent_grads = backward(&BackwardArgs {
                    grad: &grad,
                    inputs: &inputs,
                    output: &node.value,
                    needs: &needs,
                });
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "op `{}`", node.op);
                for (&p, g) in node.parents.iter().zip(parent_grads) {
                    let Some(g) = g else { continue };
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(g.len(), nodes[p].value.numel(), "op `{}`", node.op);
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
            }
            // keep leaf gradients for the caller
            if node.parents.is_empty() {
                grads[id] = Some(grad);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` (if any) into `target.grad`.
    pub fn accumulate_into(&self, var: Var<'_, T>, target: &mut Tensor<T>) -> Result<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        write!(f, "Var#{}({} {:?})", self.id, node.op, node.value.shape())
    }
}
