//! Flat key-value run configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle_adjustment::LmConfig;
use crate::initializer::{InitMethod, InitializerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Every `T`-th frame is a semantic keyframe.
    #[serde(alias = "T")]
    pub keyframe_interval: u64,
    pub min_obs: usize,
    /// Detections with a smaller box area (px²) are dropped.
    pub min_bbox_area: f64,
    pub min_descriptors: usize,
    #[serde(alias = "theta_assoc")]
    pub assoc_threshold: f64,
    /// Box measurement standard deviation (px).
    pub sigma_px: f64,
    /// Per-frame odometry standard deviations (rad, m).
    pub sigma_rot: f64,
    pub sigma_trans: f64,
    pub init_method: InitMethod,
    pub max_reprojection_px: f64,
    pub ba_enabled: bool,
    /// Run mapping on the calling thread instead of the mapping worker;
    /// makes runs reproducible.
    pub ba_sync: bool,
    /// Replay rate for `run_dataset` with the mapping worker; 0 replays
    /// as fast as frames can be processed.
    pub replay_hz: f64,
    pub lm_max_iters: usize,
    pub lm_initial_damping: f64,
    pub lm_min_relative_decrease: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let lm = LmConfig::default();
        Self {
            keyframe_interval: 4,
            min_obs: 10,
            min_bbox_area: 400.0,
            min_descriptors: 8,
            assoc_threshold: 0.0,
            sigma_px: 4.0,
            sigma_rot: 0.002,
            sigma_trans: 0.002,
            init_method: InitMethod::Quadratic,
            max_reprojection_px: InitializerConfig::default().max_reprojection_px,
            ba_enabled: true,
            ba_sync: false,
            replay_hz: 0.0,
            lm_max_iters: 20,
            lm_initial_damping: lm.initial_damping,
            lm_min_relative_decrease: lm.min_relative_decrease,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.keyframe_interval == 0 {
            return bad("keyframe_interval must be at least 1");
        }
        if !(self.sigma_px > 0.0 && self.sigma_rot > 0.0 && self.sigma_trans > 0.0) {
            return bad("standard deviations must be positive");
        }
        if self.min_bbox_area < 0.0 || !(0.0..=1.0).contains(&self.assoc_threshold) {
            return bad("min_bbox_area must be non-negative and assoc_threshold in [0, 1]");
        }
        if !(self.replay_hz >= 0.0 && self.replay_hz.is_finite()) {
            return bad("replay_hz must be a non-negative number");
        }
        if self.lm_initial_damping <= 0.0 {
            return bad("lm_initial_damping must be positive");
        }
        Ok(())
    }

    pub fn initializer(&self) -> InitializerConfig {
        InitializerConfig {
            min_obs: self.min_obs,
            max_reprojection_px: self.max_reprojection_px,
            ..InitializerConfig::default()
        }
    }

    pub fn lm(&self) -> LmConfig {
        LmConfig {
            max_iters: self.lm_max_iters,
            initial_damping: self.lm_initial_damping,
            min_relative_decrease: self.lm_min_relative_decrease,
            ..LmConfig::default()
        }
    }
}

/// True iff `frame_index` is a keyframe for interval `t`.
pub fn keyframe_policy(frame_index: u64, t: u64) -> bool {
    frame_index.is_multiple_of(t.max(1))
}
