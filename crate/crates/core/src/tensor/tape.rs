use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local derivative of one recorded operation.
///
/// Receives the op's input values, its output value and the gradient flowing
/// into that output, and returns one gradient per input (in recording order).
/// `needs[i]` is false for inputs that do not lead to any trainable leaf; the
/// op may return `None` for those.
pub trait Backward<T: Scalar>: Send + Sync {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    op: &'static str,
    value: Tensor<T>,
    inputs: Vec<Var>,
    backward: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a valid topological order, so
/// [`Tape::backward`] is a single reverse sweep.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Records the result of an operation. Rejects non-finite outputs.
    pub fn record(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: Vec<Var>,
        backward: impl Backward<T> + 'static,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs,
            backward: requires_grad.then(|| Box::new(backward) as Box<dyn Backward<T>>),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// recomputed from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_len = self.nodes[loss.0].value.len();
        if loss_len != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].value.shape().to_vec()));
        }
        for node in &mut self.nodes[..=loss.0] {
            if node.backward.is_some() {
                node.value.set_grad(None);
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(self.nodes[loss.0].value.grad_slot(), vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(grad_out) = self.nodes[idx].value.grad_slot().take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let contributions = match &node.backward {
                Some(op) => {
                    let inputs: Vec<&Tensor<T>> =
                        node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let needs: Vec<bool> = node
                        .inputs
                        .iter()
                        .map(|v| self.nodes[v.0].requires_grad)
                        .collect();
                    op.backward(&inputs, &node.value, &grad_out, &needs)
                }
                None => Vec::new(),
            };
            let input_vars = node.inputs.clone();
            self.nodes[idx].value.set_grad(Some(grad_out));

            debug_assert!(contributions.is_empty() || contributions.len() == input_vars.len());
            for (var, g) in input_vars.into_iter().zip(contributions) {
                let Some(g) = g else { continue };
                let target = &mut self.nodes[var.0];
                if !target.requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), target.value.len(), "gradient length for {}", target.op);
                accumulate(target.value.grad_slot(), g);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}
