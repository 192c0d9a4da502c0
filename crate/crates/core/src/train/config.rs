//! Training configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::losses::LossWeights;
use crate::error::TrainError;
use crate::nn::{RbnConfig, SdfNetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Patches per batch (`M`).
    pub patches: usize,
    /// Patch side in pixels (`m`).
    pub patch_size: usize,
    /// Silhouette samples per miss ray (`K`).
    pub sil_samples: usize,
    /// Eikonal samples per step (`V`).
    pub eik_samples: usize,
    pub alpha_init: f64,
    pub lr: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Train only the ray-bending network against the dataset's analytic shape.
    pub freeze_geometry: bool,
    /// Stop gradients from the ray-bending network into the hit point and normal.
    pub detach_rbn_geometry: bool,
    pub weights: LossWeights,
    pub sdf: SdfNetConfig,
    pub rbn: RbnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            patches: 64,
            patch_size: 4,
            sil_samples: 32,
            eik_samples: 1024,
            alpha_init: 50.0,
            lr: 5e-4,
            seed: 0,
            checkpoint_every: 1000,
            freeze_geometry: false,
            detach_rbn_geometry: true,
            weights: LossWeights::default(),
            sdf: SdfNetConfig::default(),
            rbn: RbnConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.patch_size < 2 {
            return bad("patch_size must be at least 2");
        }
        if self.sil_samples < 8 {
            return bad("sil_samples must be at least 8");
        }
        if self.eik_samples < 1 {
            return bad("eik_samples must be at least 1");
        }
        if self.patches < 1 {
            return bad("patches must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.alpha_init > 0.0) {
            return bad("alpha_init must be positive");
        }
        self.weights.validate().map_err(TrainError::Config)?;
        self.sdf.validate().map_err(TrainError::Config)?;
        self.rbn.validate().map_err(TrainError::Config)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let c: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Pixels per batch.
    pub fn batch_pixels(&self) -> usize {
        self.patches * self.patch_size * self.patch_size
    }
}
