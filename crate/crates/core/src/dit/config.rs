use serde::{Deserialize, Serialize};

use crate::conditioning::{PoseEncoderConfig, RefPoseEncoderConfig};
use crate::error::{Error, Result};

/// Linear layers inside each block that LoRA may wrap.
pub const LORA_TARGETS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.out", "mlp.fc1", "mlp.fc2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// `(pt, ph, pw)` on the latent grid.
    pub patch: [usize; 3],
    pub latent_channels: usize,
    pub pose_channels: usize,
    pub mlp_ratio: usize,
    pub pose_joints: usize,
    /// Heatmap width in pixels.
    pub pose_sigma: f64,
    pub pose_encoder: PoseEncoderConfig,
    pub ref_pose_encoder: RefPoseEncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            token_dim: 64,
            depth: 4,
            heads: 4,
            patch: [1, 2, 2],
            latent_channels: 3,
            pose_channels: 64,
            mlp_ratio: 4,
            pose_joints: 1,
            pose_sigma: 3.0,
            pose_encoder: PoseEncoderConfig::default(),
            ref_pose_encoder: RefPoseEncoderConfig::for_latent_channels(3),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.token_dim;
        if d == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("token_dim, depth, heads and mlp_ratio must be >= 1"));
        }
        if d % self.heads != 0 {
            return Err(Error::config(format!("token_dim {d} is not divisible by {} heads", self.heads)));
        }
        if d % 2 != 0 {
            return Err(Error::config(format!("token_dim {d} must be even")));
        }
        if self.patch.iter().any(|&p| p == 0) {
            return Err(Error::config(format!("patch {:?} must be >= 1 on every axis", self.patch)));
        }
        if self.latent_channels == 0 {
            return Err(Error::config("latent_channels must be >= 1"));
        }
        if !(1..=18).contains(&self.pose_joints) {
            return Err(Error::config(format!("pose_joints {} outside 1..=18", self.pose_joints)));
        }
        if !(self.pose_sigma > 0.0 && self.pose_sigma.is_finite()) {
            return Err(Error::config(format!("pose_sigma {} must be positive", self.pose_sigma)));
        }
        self.pose_encoder.validate()?;
        if self.pose_encoder.output_channels() != self.pose_channels {
            return Err(Error::config(format!(
                "pose encoder ends with {} channels but pose_channels is {}",
                self.pose_encoder.output_channels(),
                self.pose_channels
            )));
        }
        self.ref_pose_encoder.validate(self.latent_channels)
    }

    /// Values per patch: `pt·ph·pw`.
    pub fn patch_volume(&self) -> usize {
        self.patch.iter().product()
    }

    /// Latent grid `[T, h, w]` → token grid, or a config error if the patch
    /// does not tile it.
    pub fn token_grid(&self, grid: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if grid[a] % self.patch[a] != 0 {
                return Err(Error::config(format!(
                    "patch {:?} does not divide latent grid {grid:?}",
                    self.patch
                )));
            }
            out[a] = grid[a] / self.patch[a];
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            targets: LORA_TARGETS.iter().map(|s| s.to_string()).collect(),
            dropout: 0.0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("LoRA rank must be >= 1"));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("LoRA alpha must be finite"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("LoRA target set is empty"));
        }
        if self.dropout != 0.0 {
            return Err(Error::config(format!("LoRA dropout {} unsupported; only 0", self.dropout)));
        }
        for t in &self.targets {
            if !LORA_TARGETS.contains(&t.as_str()) {
                return Err(Error::config(format!(
                    "unknown LoRA target `{t}`; expected one of {LORA_TARGETS:?}"
                )));
            }
        }
        Ok(())
    }
}
