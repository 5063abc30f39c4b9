//! Run and training configuration, serialized as strict JSON.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// How labels are wired to modalities in the synthetic tasks.
///
/// FACTORED: the video stream alone determines the verb and the text stream
/// alone determines the noun. COMPOSED: the verb is (v + n) mod Vv with v
/// visible only in video and n only in text, so no single modality suffices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    #[default]
    Factored,
    Composed,
}

impl std::str::FromStr for TaskMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "factored" => Ok(TaskMode::Factored),
            "composed" => Ok(TaskMode::Composed),
            other => Err(CoreError::Configuration(format!(
                "unknown task mode '{}', expected factored|composed",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Ablation {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "separate-A")]
    SeparateA,
    #[serde(rename = "mlp-fusion")]
    MlpFusion,
    #[serde(rename = "unimodal-V")]
    UnimodalV,
    #[serde(rename = "unimodal-T")]
    UnimodalT,
}

impl std::str::FromStr for Ablation {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "separate-A" => Ok(Ablation::SeparateA),
            "mlp-fusion" => Ok(Ablation::MlpFusion),
            "unimodal-V" => Ok(Ablation::UnimodalV),
            "unimodal-T" => Ok(Ablation::UnimodalT),
            other => Err(CoreError::Configuration(format!(
                "unknown ablation '{}', expected none|separate-A|mlp-fusion|unimodal-V|unimodal-T",
                other
            ))),
        }
    }
}

fn default_batch() -> usize {
    64
}
fn default_frames() -> usize {
    32
}
fn default_text_len() -> usize {
    24
}
fn default_d_raw() -> usize {
    32
}
fn default_d_model() -> usize {
    64
}
fn default_n_state() -> usize {
    16
}
fn default_conv_k() -> usize {
    3
}
fn default_depth() -> usize {
    1
}
fn default_verb_vocab() -> usize {
    8
}
fn default_noun_vocab() -> usize {
    12
}
fn default_k_v() -> usize {
    4
}
fn default_noise() -> f64 {
    0.5
}
fn default_train_samples() -> usize {
    8000
}
fn default_epochs() -> usize {
    20
}
fn default_warmup_epochs() -> usize {
    2
}
fn default_base_lr() -> f64 {
    1e-6
}
fn default_peak_lr() -> f64 {
    1e-3
}
fn default_peak_lr_fusion() -> f64 {
    3e-3
}
fn default_final_lr() -> f64 {
    1e-5
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_clip_norm() -> f64 {
    1.0
}

/// Desk-scale training configuration. Every field has a default so partial
/// JSON configs work; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Video sequence length F.
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Text sequence length L.
    #[serde(default = "default_text_len")]
    pub text_len: usize,
    /// Raw feature width fed to the pre-encoders.
    #[serde(default = "default_d_raw")]
    pub d_raw: usize,
    /// Shared model width D.
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    /// State size N per channel.
    #[serde(default = "default_n_state")]
    pub n_state: usize,
    /// Pre-encoder depthwise conv width (odd).
    #[serde(default = "default_conv_k")]
    pub conv_k: usize,
    /// Number of stacked fusion stages.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Optional low-rank factorization of the Δ projection.
    #[serde(default)]
    pub delta_rank: Option<usize>,
    #[serde(default = "default_verb_vocab")]
    pub verb_vocab: usize,
    #[serde(default = "default_noun_vocab")]
    pub noun_vocab: usize,
    /// Prototype copies placed in each video sequence.
    #[serde(default = "default_k_v")]
    pub k_v: usize,
    /// Gaussian noise level for video filler rows.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default)]
    pub mode: TaskMode,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    /// Peak for the fusion parameter group (selective projections and A).
    #[serde(default = "default_peak_lr_fusion")]
    pub peak_lr_fusion: f64,
    #[serde(default = "default_final_lr")]
    pub final_lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    /// Use B̄ = Δ·B instead of exact zero-order hold.
    #[serde(default)]
    pub euler_discretization: bool,
    /// Skip optimizer updates for the shared transition matrix.
    #[serde(default)]
    pub freeze_shared_a: bool,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_k % 2 == 0 {
            return Err(CoreError::Configuration(format!(
                "conv_k must be odd, got {}",
                self.conv_k
            )));
        }
        if self.depth < 1 {
            return Err(CoreError::Configuration("depth must be >= 1".into()));
        }
        if self.train_samples < 2 {
            return Err(CoreError::Configuration(
                "train_samples must be >= 2 for a train/val split".into(),
            ));
        }
        if self.verb_vocab < 2 || self.noun_vocab < 2 {
            return Err(CoreError::Configuration(
                "verb_vocab and noun_vocab must be >= 2".into(),
            ));
        }
        if self.k_v > self.frames {
            return Err(CoreError::Configuration(format!(
                "k_v {} exceeds frames {}",
                self.k_v, self.frames
            )));
        }
        if let Some(r) = self.delta_rank {
            if r < 1 || r > self.d_model {
                return Err(CoreError::Configuration(format!(
                    "delta_rank {} out of range 1..={}",
                    r, self.d_model
                )));
            }
        }
        Ok(())
    }

    /// Platform-stable hash of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Top-level config consumed by the CLI: the training config plus paths.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    /// Output directory for metrics, checkpoints, and the echoed config.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Optional dataset cache path (written by gen-data).
    #[serde(default)]
    pub data_path: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// FNV-1a over bytes; endianness-free and stable across platforms.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = TrainConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"train": {"not_a_field": 1}}"#);
        assert!(err.is_err());
        let err = RunConfig::from_json(r#"{"mystery": true}"#);
        assert!(err.is_err());
    }

    #[test]
    fn ablation_spellings() {
        assert_eq!("separate-A".parse::<Ablation>().unwrap(), Ablation::SeparateA);
        assert!("separate-a".parse::<Ablation>().is_err());
        let j = serde_json::to_string(&Ablation::UnimodalV).unwrap();
        assert_eq!(j, "\"unimodal-V\"");
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.d_model = 32;
        assert_ne!(a.hash(), b.hash());
    }
}
