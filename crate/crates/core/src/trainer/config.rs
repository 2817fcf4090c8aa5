use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::datakit::{AugmentConfig, Crop, UncertainPolicy};

/// How head-training batches are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Equal share of every (label, site) stratum in each batch, so that
    /// anchors see both aligned and conflicting positives.
    Balanced,
    /// Plain shuffled mini-batches.
    Shuffled,
}

/// Flat training configuration shared by the encoder and head stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Head training epochs.
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub base_lr: f64,
    pub pretrain_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Head gradients are rescaled to at most this L2 norm; 0 disables.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub image_side: usize,
    pub lambda: f64,
    pub seed: u64,
    pub hidden_width: usize,
    /// Output channels of the four encoder blocks.
    pub channels: Vec<usize>,
    pub sampler: SamplerKind,
    pub augment: bool,
    pub crop_fraction: f64,
    pub max_rotation_deg: f64,
    pub cutout_fraction: f64,
    pub uncertain_policy: UncertainPolicy,
    /// Fraction of the pretraining set held out for loss monitoring.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            pretrain_epochs: 10,
            base_lr: 0.01,
            pretrain_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            grad_clip: 1.0,
            batch_size: 32,
            image_side: 448,
            lambda: 0.0,
            seed: 0,
            hidden_width: 128,
            channels: vec![16, 32, 64, 128],
            sampler: SamplerKind::Balanced,
            augment: true,
            crop_fraction: 0.875,
            max_rotation_deg: 10.0,
            cutout_fraction: 0.25,
            uncertain_policy: UncertainPolicy::Negative,
            holdout_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.batch_size == 0 || self.hidden_width == 0 {
            return bad("batch_size and hidden_width must be positive".into());
        }
        if self.image_side == 0 || self.image_side % 16 != 0 {
            return bad(format!(
                "image_side {} is not a positive multiple of 16",
                self.image_side
            ));
        }
        if !(self.base_lr > 0.0 && self.pretrain_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.channels.len() != 4 || self.channels.contains(&0) {
            return bad(format!("channels must list 4 positive widths, got {:?}", self.channels));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction {} outside [0, 1)", self.holdout_fraction));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn augment_config(&self) -> AugmentConfig {
        if !self.augment {
            return AugmentConfig::disabled(self.image_side);
        }
        AugmentConfig {
            output_side: self.image_side,
            crop: Crop::Fraction(self.crop_fraction),
            max_rotation_deg: self.max_rotation_deg,
            cutout_fraction: self.cutout_fraction,
        }
    }

    /// Stable digest of the configuration (seed included) plus a stage tag.
    pub fn fingerprint(&self, stage: &str, extra: &[&str]) -> String {
        let mut hasher = Sha256::new();
        hasher.update(stage.as_bytes());
        hasher.update(serde_json::to_vec(self).expect("config serializes"));
        for e in extra {
            hasher.update([0u8]);
            hasher.update(e.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Cosine decay: `base_lr * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr_schedule(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64, TrainError> {
    if epoch >= total_epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            total: total_epochs,
        });
    }
    let progress = epoch as f64 / total_epochs as f64;
    Ok(base_lr * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0)
}
