//! Central finite-difference gradient verification.
//!
//! The numerical side rebuilds the forward pass from scratch for every
//! perturbed coordinate, so it shares no code path with the recorded
//! backward it is checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::Parameterized;
use crate::tensor::Tensor;

/// Step used throughout the crate's gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small floor so near-zero gradients do not blow up
/// the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl CheckRow {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Check the gradient of a scalar-valued graph expression with respect to
/// every entry of every leaf in `leaves`.
///
/// `build` receives a fresh graph plus the leaves (tracked) and must return
/// the scalar loss var. Returns the worst relative error over all entries.
pub fn fd_check_graph<F>(build: F, leaves: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    // Analytic gradients from one recorded pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();

    let eval = |leaves: &[Tensor]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = leaves.iter().map(|t| g.input(t)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut worst = 0.0f64;
    for li in 0..work.len() {
        for ei in 0..work[li].numel() {
            let orig = work[li].data()[ei];
            work[li].data_mut()[ei] = orig + eps;
            let up = eval(&work)?;
            work[li].data_mut()[ei] = orig - eps;
            let down = eval(&work)?;
            work[li].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[li][ei], numeric));
        }
    }
    Ok(worst)
}

/// Check every named parameter of a model against central differences.
///
/// `analytic` runs one forward/backward and must leave gradients populated
/// on the model's parameters. `value` evaluates the same scalar loss without
/// recording. One `CheckRow` per parameter tensor.
pub fn fd_check_params<M, FA, FL>(
    model: &mut M,
    analytic: FA,
    mut value: FL,
    eps: f64,
) -> Result<Vec<CheckRow>>
where
    M: Parameterized,
    FA: FnOnce(&mut M) -> Result<()>,
    FL: FnMut(&mut M) -> Result<f64>,
{
    model.zero_grads();
    analytic(model)?;
    let grads: Vec<(String, Vec<f64>)> = model
        .params()
        .iter()
        .map(|(name, t)| {
            let g = t
                .grad()
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (name.clone(), g)
        })
        .collect();

    let mut rows = Vec::with_capacity(grads.len());
    for (pi, (name, analytic_grad)) in grads.iter().enumerate() {
        let numel = analytic_grad.len();
        let mut worst = 0.0f64;
        for ei in 0..numel {
            let orig = {
                let mut ps = model.params_mut();
                let d = ps[pi].1.data_mut();
                let orig = d[ei];
                d[ei] = orig + eps;
                orig
            };
            let up = value(model)?;
            {
                let mut ps = model.params_mut();
                ps[pi].1.data_mut()[ei] = orig - eps;
            }
            let down = value(model)?;
            {
                let mut ps = model.params_mut();
                ps[pi].1.data_mut()[ei] = orig;
            }
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic_grad[ei], numeric));
        }
        rows.push(CheckRow {
            name: name.clone(),
            max_rel_err: worst,
            checked: numel,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_weight_gradient_matches_fd() {
        // random x, W (seed 7): d sum(x·W) / dW vs central differences
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let worst = fd_check_graph(
            |g, vars| {
                let y = g.linear(vars[0], vars[1], None)?;
                Ok(g.sum_all(y))
            },
            &[x, w],
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= 1e-6, "max rel err {worst:e}");
    }

    #[test]
    fn conv_kernel_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[2, 5, 3], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let worst = fd_check_graph(
            |g, vars| {
                let y = g.conv1d_depthwise(vars[0], vars[1])?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum_all(y2))
            },
            &[x, k],
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= 1e-6, "max rel err {worst:e}");
    }
}
