//! Named-parameter registry shared by the optimizer, checkpointing, and
//! gradient checking.

use crate::tensor::Tensor;

/// Anything exposing an ordered table of named trainable tensors.
///
/// The order must be stable across calls and across construction with the
/// same configuration: checkpoints and optimizer moments index into it.
pub trait Parameterized {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn zero_grads(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }
}

/// L2 norm over every gradient buffer in the set.
pub fn global_grad_norm<M: Parameterized>(model: &M) -> f64 {
    let mut sq = 0.0;
    for (_, t) in model.params() {
        if let Some(g) = t.grad() {
            for v in g {
                sq += v * v;
            }
        }
    }
    sq.sqrt()
}

/// Scale every gradient so the global norm does not exceed `max_norm`.
pub fn clip_global_norm<M: Parameterized>(model: &mut M, max_norm: f64) -> f64 {
    let norm = global_grad_norm(model);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, t) in model.params_mut() {
            if t.grad().is_some() {
                for v in t.grad_mut() {
                    *v *= s;
                }
            }
        }
    }
    norm
}
