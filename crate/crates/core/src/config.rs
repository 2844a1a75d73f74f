use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};

/// Every tunable of the engine. Defaults reproduce the reported launch setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Feature dimension.
    pub d: usize,
    /// Memory hidden width.
    pub hidden: usize,
    pub lr: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    /// Multiplicative forgetting factor applied on non-surprising tiles.
    pub alpha_f: f64,
    /// Warm-up window (tiles that always update and calibrate the threshold).
    pub t_w: usize,
    /// Threshold scale: tau = mean + lambda * std over the warm-up scores.
    pub lambda: f64,
    pub huber_delta: f64,
    /// Fusion weight on relevance (0 = surprise only, 1 = relevance only).
    pub alpha: f64,
    /// Base first-pass search budget.
    pub k0: usize,
    pub r_max: usize,
    pub pool_floor: usize,
    /// High-magnification patches kept per ROI.
    pub t_per_roi: usize,
    /// Global evidence cap.
    pub v_max: usize,
    /// Reference cases retrieved from the archive.
    pub archive_k: usize,
    pub epsilon_norm: f64,
    pub seed: u64,
    pub rounds: usize,
    /// Side of the readout neighborhood, in low-magnification tile strides.
    pub neighborhood_scale: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            d: 768,
            hidden: 768,
            lr: 0.05,
            clip: 5.0,
            alpha_f: 0.999,
            t_w: 100,
            lambda: 1.0,
            huber_delta: 1.0,
            alpha: 0.5,
            k0: 10,
            r_max: 1,
            pool_floor: 30,
            t_per_roi: 2,
            v_max: 15,
            archive_k: 3,
            epsilon_norm: 1e-8,
            seed: 0,
            rounds: 1,
            neighborhood_scale: 1.0,
        }
    }
}

impl EngineConfig {
    /// Default configuration at a smaller feature width (hidden = d).
    pub fn with_dim(d: usize) -> Self {
        Self {
            d,
            hidden: d,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive_ints = [
            ("d", self.d),
            ("hidden", self.hidden),
            ("t_w", self.t_w),
            ("k0", self.k0),
            ("r_max", self.r_max),
            ("pool_floor", self.pool_floor),
            ("t_per_roi", self.t_per_roi),
            ("v_max", self.v_max),
            ("rounds", self.rounds),
        ];
        for (name, v) in positive_ints {
            if v == 0 {
                return Err(NavError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let positive_reals = [
            ("lr", self.lr),
            ("clip", self.clip),
            ("huber_delta", self.huber_delta),
            ("epsilon_norm", self.epsilon_norm),
            ("neighborhood_scale", self.neighborhood_scale),
        ];
        for (name, v) in positive_reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(NavError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha_f > 0.0 && self.alpha_f <= 1.0) {
            return Err(NavError::InvalidConfig(format!(
                "alpha_f must lie in (0, 1], got {}",
                self.alpha_f
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(NavError::InvalidConfig(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !self.lambda.is_finite() {
            return Err(NavError::InvalidConfig("lambda must be finite".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }
}
