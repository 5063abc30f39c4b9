//! Adam with decoupled weight decay over the named-parameter registry.

use crate::config::TrainConfig;
use crate::error::Result;
use crate::params::Parameterized;
use crate::schedule::{lr_group_for, weight_decay_exempt, Schedule};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update on a single tensor, with decoupled decay:
/// p ← p − lr·( m̂/(√v̂+ε) + wd·p ).
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) {
    debug_assert!(t >= 1);
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * param[i]);
    }
}

/// Optimizer moments aligned with the parameter registry order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Completed steps (bias-correction exponent).
    pub t: u64,
}

impl AdamState {
    pub fn new<M: Parameterized>(model: &M) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    /// Apply one optimizer step using the gradients currently stored on the
    /// model's parameters. Parameters without a gradient buffer are left
    /// untouched; the shared transition matrix is skipped when frozen.
    pub fn step<M: Parameterized>(
        &mut self,
        model: &mut M,
        schedule: &Schedule,
        step_index: usize,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t;
        for (pi, (name, tensor)) in model.params_mut().into_iter().enumerate() {
            if cfg.freeze_shared_a && (name.ends_with("a_log") || name.ends_with("a_log_t")) {
                continue;
            }
            let lr = schedule.lr_at(step_index, lr_group_for(&name))?;
            let wd = if weight_decay_exempt(&name) {
                0.0
            } else {
                cfg.weight_decay
            };
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            adam_step(
                tensor.data_mut(),
                &grad,
                &mut self.m[pi],
                &mut self.v[pi],
                t,
                lr,
                ADAM_BETAS,
                ADAM_EPS,
                wd,
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_moments_leaves_params_unchanged() {
        let mut p = vec![1.5, -0.5];
        let g = vec![0.0, 0.0];
        let mut m = vec![0.0, 0.0];
        let mut v = vec![0.0, 0.0];
        adam_step(&mut p, &g, &mut m, &mut v, 1, 0.1, ADAM_BETAS, ADAM_EPS, 0.0);
        assert_eq!(p, vec![1.5, -0.5]);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_about_lr() {
        // m̂ = v̂ = 1 after bias correction, so the update is lr/(1+eps).
        let mut p = vec![0.0];
        let g = vec![1.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_step(&mut p, &g, &mut m, &mut v, 1, 0.1, ADAM_BETAS, ADAM_EPS, 0.0);
        assert!((p[0] + 0.1).abs() < 1e-6, "got {}", p[0]);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient_signal() {
        let mut p = vec![2.0];
        let g = vec![0.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_step(&mut p, &g, &mut m, &mut v, 1, 0.1, ADAM_BETAS, ADAM_EPS, 0.01);
        assert!((p[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn repeated_steps_are_deterministic() {
        let run = || {
            let mut p = vec![1.0, -1.0, 0.25];
            let mut m = vec![0.0; 3];
            let mut v = vec![0.0; 3];
            for t in 1..=10u64 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
                adam_step(&mut p, &g, &mut m, &mut v, t, 0.05, ADAM_BETAS, ADAM_EPS, 0.0);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
