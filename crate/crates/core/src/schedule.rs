//! Warmup + half-wave cosine learning-rate schedule with per-group peaks.

use std::collections::BTreeMap;

use crate::config::TrainConfig;
use crate::error::{CoreError, Result};

/// Linear warmup from `base_lr` to the group's peak, then a half-wave
/// cosine from the peak down to `final_lr`.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub base_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    /// Peak overrides per parameter group name.
    pub group_peaks: BTreeMap<String, f64>,
}

pub const GROUP_DEFAULT: &str = "default";
pub const GROUP_FUSION: &str = "fusion";

impl Schedule {
    pub fn from_config(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        let mut group_peaks = BTreeMap::new();
        group_peaks.insert(GROUP_FUSION.to_string(), cfg.peak_lr_fusion);
        Schedule {
            base_lr: cfg.base_lr,
            peak_lr: cfg.peak_lr,
            final_lr: cfg.final_lr,
            warmup_epochs: cfg.warmup_epochs,
            total_epochs: cfg.epochs,
            steps_per_epoch,
            group_peaks,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    fn peak_for(&self, group: &str) -> f64 {
        self.group_peaks.get(group).copied().unwrap_or(self.peak_lr)
    }

    /// Learning rate at a step in [0, total_steps]. Linear from base to the
    /// group peak across warmup, then final + ½(peak−final)(1+cos(πt)) with
    /// t spanning the post-warmup steps.
    pub fn lr_at(&self, step: usize, group: &str) -> Result<f64> {
        let total = self.total_steps();
        if step > total {
            return Err(CoreError::Contract(format!(
                "schedule step {step} out of range 0..={total}"
            )));
        }
        let warmup = self.warmup_steps();
        let peak = self.peak_for(group);
        if step < warmup {
            let t = step as f64 / warmup as f64;
            return Ok(self.base_lr + (peak - self.base_lr) * t);
        }
        let span = total - warmup;
        if span == 0 {
            return Ok(self.final_lr);
        }
        let t = (step - warmup) as f64 / span as f64;
        Ok(self.final_lr + 0.5 * (peak - self.final_lr) * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

/// Parameter-group assignment: every selective-stage parameter (the shared
/// A and the B/C/Δ projections) trains at the higher fusion peak; encoders,
/// embeddings, and heads use the default group.
pub fn lr_group_for(name: &str) -> &'static str {
    if name.starts_with("stage") {
        GROUP_FUSION
    } else {
        GROUP_DEFAULT
    }
}

/// Weight decay is disabled for the transition matrix, the Δ base, and all
/// biases.
pub fn weight_decay_exempt(name: &str) -> bool {
    name.ends_with("a_log")
        || name.ends_with("a_log_t")
        || name.ends_with("delta_base")
        || name.ends_with("b_delta")
        || name.ends_with(".b")
        || name.ends_with("_b1")
        || name.ends_with("_b2")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> Schedule {
        Schedule::from_config(&TrainConfig::default(), 100)
    }

    #[test]
    fn endpoints_match_quoted_rates() {
        let s = default_schedule();
        assert!((s.lr_at(0, GROUP_DEFAULT).unwrap() - 1e-6).abs() <= 1e-12);
        let w = s.warmup_steps();
        assert!((s.lr_at(w, GROUP_FUSION).unwrap() - 3e-3).abs() <= 1e-12);
        assert!((s.lr_at(w, GROUP_DEFAULT).unwrap() - 1e-3).abs() <= 1e-12);
        assert!((s.lr_at(s.total_steps(), GROUP_DEFAULT).unwrap() - 1e-5).abs() <= 1e-12);
        assert!((s.lr_at(s.total_steps(), GROUP_FUSION).unwrap() - 1e-5).abs() <= 1e-12);
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let s = default_schedule();
        let w = s.warmup_steps();
        // value approached from below (one step before the boundary,
        // linearly extrapolated) against the cosine branch at the boundary
        let below = s.lr_at(w - 1, GROUP_FUSION).unwrap();
        let slope = below - s.lr_at(w - 2, GROUP_FUSION).unwrap();
        let limit_from_below = below + slope;
        let at = s.lr_at(w, GROUP_FUSION).unwrap();
        assert!((at - limit_from_below).abs() <= 1e-15 * 3e-3 + 1e-15);
    }

    #[test]
    fn out_of_range_step_is_contract_error() {
        let s = default_schedule();
        assert!(s.lr_at(s.total_steps() + 1, GROUP_DEFAULT).is_err());
    }

    #[test]
    fn groups_route_names() {
        assert_eq!(lr_group_for("stage0.a_log"), GROUP_FUSION);
        assert_eq!(lr_group_for("stage0.v.w_delta"), GROUP_FUSION);
        assert_eq!(lr_group_for("encoder_v.mlp_w1"), GROUP_DEFAULT);
        assert_eq!(lr_group_for("head_verb.w"), GROUP_DEFAULT);
        assert_eq!(lr_group_for("embed_t.table"), GROUP_DEFAULT);
    }

    #[test]
    fn decay_exemptions() {
        assert!(weight_decay_exempt("stage0.a_log"));
        assert!(weight_decay_exempt("stage0.v.delta_base"));
        assert!(weight_decay_exempt("stage0.v.b_delta"));
        assert!(weight_decay_exempt("head_verb.b"));
        assert!(weight_decay_exempt("encoder_v.mlp_b1"));
        assert!(!weight_decay_exempt("stage0.v.w_b"));
        assert!(!weight_decay_exempt("encoder_v.mlp_w1"));
        assert!(!weight_decay_exempt("embed_t.table"));
    }
}
