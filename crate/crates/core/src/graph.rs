//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! A `Graph` records every primitive operation executed during a forward
//! pass as an ordered list of `(inputs, outputs)` references. `backward`
//! walks that list once in reverse, accumulating gradients into the nodes.
//! The tape is built for exactly one forward/backward pair and dropped
//! afterwards; there is no support for higher-order derivatives.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Handle to a tensor stored in a `Graph`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// A differentiable operation recorded on the tape.
///
/// `backward` receives the op's input and output tensors, the gradients
/// that arrived at each output (`None` if an output received none), and a
/// `needs` mask saying which inputs require a gradient. It returns one
/// gradient buffer per input, `None` where `needs` is false.
pub trait Primitive {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        outputs: &[&Tensor],
        out_grads: &[Option<&[f64]>],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct OpRecord {
    prim: Box<dyn Primitive>,
    inputs: Vec<Var>,
    outputs: Vec<Var>,
}

pub struct Graph {
    nodes: Vec<Tensor>,
    ops: Vec<OpRecord>,
    grad_enabled: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        crate::ops::tune_allocator();
        Graph {
            nodes: Vec::new(),
            ops: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A graph that records nothing; forward values only.
    pub fn no_grad() -> Self {
        crate::ops::tune_allocator();
        Graph {
            nodes: Vec::new(),
            ops: Vec::new(),
            grad_enabled: false,
            backward_done: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Insert a tensor, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor)
    }

    /// Insert a tensor with gradient tracking forced off.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor)
    }

    /// Insert a parameter tensor's current value as a tracked leaf.
    /// Tracking is suppressed in a no-grad graph.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut t = tensor.clone();
        t.set_requires_grad(self.grad_enabled);
        self.push(t)
    }

    /// Insert input data as an untracked leaf.
    pub fn input(&mut self, tensor: &Tensor) -> Var {
        let mut t = tensor.clone();
        t.set_requires_grad(false);
        self.push(t)
    }

    fn push(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(tensor);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Record a primitive with its freshly computed outputs; returns one
    /// `Var` per output. Outputs require grad iff any input does and the
    /// graph is tracking; untracked ops are not recorded.
    pub fn record(
        &mut self,
        prim: Box<dyn Primitive>,
        inputs: &[Var],
        outputs: Vec<Tensor>,
    ) -> Vec<Var> {
        let track = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad());
        let mut out_vars = Vec::with_capacity(outputs.len());
        for mut out in outputs {
            out.set_requires_grad(track);
            out_vars.push(self.push(out));
        }
        if track {
            self.ops.push(OpRecord {
                prim,
                inputs: inputs.to_vec(),
                outputs: out_vars.clone(),
            });
        }
        out_vars
    }

    /// Single-output convenience wrapper for `record`.
    pub fn record1(&mut self, prim: Box<dyn Primitive>, inputs: &[Var], output: Tensor) -> Var {
        self.record(prim, inputs, vec![output])[0]
    }

    /// Reverse pass from a scalar loss. Populates the gradient of every
    /// tracked tensor reachable from `loss`, accumulating across fan-out.
    /// The tape is consumed: recorded ops (and their saved buffers) are
    /// released, and a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.is_scalar() {
            return Err(CoreError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.shape()
            )));
        }
        if self.backward_done {
            return Err(CoreError::Contract(
                "backward was already called on this graph".into(),
            ));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad() {
            // Nothing tracked feeds the loss; no gradients to produce.
            self.ops.clear();
            return Ok(());
        }
        self.nodes[loss.0].accumulate_grad(&[1.0]);

        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            let any_out_grad = op
                .outputs
                .iter()
                .any(|v| self.nodes[v.0].grad().is_some());
            if !any_out_grad {
                continue;
            }
            let needs: Vec<bool> = op
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad())
                .collect();
            let input_grads = {
                let inputs: Vec<&Tensor> = op.inputs.iter().map(|v| &self.nodes[v.0]).collect();
                let outputs: Vec<&Tensor> = op.outputs.iter().map(|v| &self.nodes[v.0]).collect();
                let out_grads: Vec<Option<&[f64]>> =
                    op.outputs.iter().map(|v| self.nodes[v.0].grad()).collect();
                op.prim.backward(&inputs, &outputs, &out_grads, &needs)
            };
            debug_assert_eq!(input_grads.len(), op.inputs.len());
            for (slot, g) in op.inputs.iter().zip(input_grads) {
                if let Some(g) = g {
                    debug_assert_eq!(g.len(), self.nodes[slot.0].numel(), "{}", op.prim.name());
                    self.nodes[slot.0].accumulate_grad_owned(g);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(&[3]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, CoreError::Contract(_)));
    }

    #[test]
    fn backward_rejects_second_call() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(1.0));
        g.backward(x).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn untracked_graph_records_nothing() {
        let mut g = Graph::no_grad();
        let x = g.param(&Tensor::zeros(&[2]));
        assert!(!g.value(x).requires_grad());
        assert_eq!(g.num_ops(), 0);
    }
}
