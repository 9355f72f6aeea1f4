use serde::{Deserialize, Serialize};

use super::{FpgnnError, Result};

/// Top-left corner of the 6x6 window assumed dry in every scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DryPatch {
    pub row: usize,
    pub col: usize,
}

impl DryPatch {
    pub const SIZE: usize = 6;
}

impl Default for DryPatch {
    fn default() -> Self {
        Self { row: 0, col: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStop {
    /// Epochs without validation improvement before stopping is allowed.
    pub patience: usize,
    /// Stopping also requires every training mask to span more than this.
    pub range_gate: f64,
    pub max_epochs: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self { patience: 20, range_gate: 0.9, max_epochs: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegWeights {
    pub dense_penalty_scale: f64,
    pub range_term: f64,
    pub clip_var_term: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self { dense_penalty_scale: 0.01, range_term: 10.0, clip_var_term: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub split_fraction: f64,
    pub batch_fraction: f64,
    pub threshold_grid: Vec<f32>,
    pub early_stop: EarlyStop,
    pub reg_weights: RegWeights,
    pub dry_patch: DryPatch,
    pub stratum_count: usize,
    /// Random initializations screened before training; the one whose
    /// masks already correlate best with the gauge is trained.
    pub init_candidates: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            split_fraction: 0.8,
            batch_fraction: 0.5,
            threshold_grid: default_thresholds(),
            early_stop: EarlyStop::default(),
            reg_weights: RegWeights::default(),
            dry_patch: DryPatch::default(),
            stratum_count: 4,
            init_candidates: 8,
            seed: 42,
        }
    }
}

/// 0.10, 0.15, ..., 0.55.
pub(crate) fn default_thresholds() -> Vec<f32> {
    (0..10).map(|i| (10 + 5 * i) as f32 / 100.0).collect()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FpgnnError::InvalidConfig(m));
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split_fraction {} outside (0, 1)", self.split_fraction));
        }
        if !(self.batch_fraction > 0.0 && self.batch_fraction <= 1.0) {
            return bad(format!("batch_fraction {} outside (0, 1]", self.batch_fraction));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if let Some(t) = self.threshold_grid.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return bad(format!("threshold {t} outside (0, 1)"));
        }
        if self.stratum_count == 0 {
            return bad("stratum_count must be at least 1".into());
        }
        if self.init_candidates == 0 {
            return bad("init_candidates must be at least 1".into());
        }
        if self.early_stop.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        Ok(())
    }

    /// Checks the dry patch fits an image of the given size.
    pub fn check_dry_patch(&self, height: usize, width: usize) -> Result<()> {
        let p = self.dry_patch;
        if p.row + DryPatch::SIZE > height || p.col + DryPatch::SIZE > width {
            return Err(FpgnnError::InvalidConfig(format!(
                "dry patch at ({}, {}) does not fit a {height}x{width} image",
                p.row, p.col
            )));
        }
        Ok(())
    }
}
