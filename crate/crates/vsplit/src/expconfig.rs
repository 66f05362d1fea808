//! Declarative experiment configuration: one JSON file describes the data,
//! noise, model, training, and evaluation of a run. Unknown keys are
//! rejected so typos fail loudly instead of silently using defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ChannelKind;
use crate::error::{Result, VsplitError};
use crate::vse::VseConfig;

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;

/// Gaussian noise scales the pipeline is specified for (multiples of the
/// clean-signal std; 0 disables the Gaussian component).
pub const GAUSSIAN_SCALES: [f64; 5] = [0.0, 1.0, 1.5, 2.0, 4.0];
/// Poisson factors the pipeline is specified for (0 disables shot noise).
pub const POISSON_FACTORS: [f64; 2] = [0.0, 1000.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind1: ChannelKind,
    pub kind2: ChannelKind,
    /// Number of full images to synthesize (split 80/10/10 afterwards).
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub density1: f64,
    pub density2: f64,
    /// Peak intensity of each clean channel.
    pub peak: f64,
    pub seed: u64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind1: ChannelKind::Dots,
            kind2: ChannelKind::Curves,
            count: 40,
            height: 128,
            width: 128,
            density1: 0.04,
            density2: 0.08,
            peak: 1000.0,
            seed: 0,
            split_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// One of [`GAUSSIAN_SCALES`].
    pub gaussian_scale: f64,
    /// One of [`POISSON_FACTORS`].
    pub poisson_factor: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gaussian_scale: 1.0,
            poisson_factor: 1000.0,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Full,
    Mixed16,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch: usize,
    /// Maximum epochs; early stopping may end the run sooner.
    pub epochs: usize,
    /// Early-stopping patience, in epochs without validation improvement.
    pub patience: usize,
    pub precision: Precision,
    /// Forces full precision and guarantees bit-reproducible runs.
    pub determinism: bool,
    pub seed: u64,
    /// Random training crops taken from each full image per epoch.
    pub patches_per_sample: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 16,
            epochs: 50,
            patience: 10,
            precision: Precision::Full,
            determinism: true,
            seed: 0,
            patches_per_sample: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Posterior samples per input for MMSE estimates.
    pub k: usize,
    /// Tile side for full-frame prediction.
    pub tile: usize,
    /// Overlap margin discarded from each tile edge.
    pub pad: usize,
    /// Calibration-curve bin count.
    pub bins: usize,
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            k: 50,
            tile: 128,
            pad: 24,
            bins: 30,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: DataConfig,
    pub noise: NoiseConfig,
    pub model: VseConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: EXPERIMENT_SCHEMA_VERSION,
            data: DataConfig::default(),
            noise: NoiseConfig::default(),
            model: VseConfig::default(),
            training: TrainingConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(VsplitError::Config(msg));
        if self.count < 10 {
            return bad(format!(
                "data.count must be >= 10 for an 80/10/10 split, got {}",
                self.count
            ));
        }
        if self.height < 32 || self.width < 32 {
            return bad(format!(
                "data images must be at least 32x32, got {}x{}",
                self.height, self.width
            ));
        }
        for (name, v) in [("density1", self.density1), ("density2", self.density2)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("data.{name} must lie in (0, 1], got {v}"));
            }
        }
        if !(self.peak > 0.0 && self.peak.is_finite()) {
            return bad(format!("data.peak must be positive, got {}", self.peak));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(VsplitError::Config(msg));
        if self.schema_version != EXPERIMENT_SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {EXPERIMENT_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.data.validate()?;
        let d = &self.data;
        let n = &self.noise;
        if !GAUSSIAN_SCALES.contains(&n.gaussian_scale) {
            return bad(format!(
                "noise.gaussian_scale must be one of {GAUSSIAN_SCALES:?}, got {}",
                n.gaussian_scale
            ));
        }
        if !POISSON_FACTORS.contains(&n.poisson_factor) {
            return bad(format!(
                "noise.poisson_factor must be one of {POISSON_FACTORS:?}, got {}",
                n.poisson_factor
            ));
        }
        self.model.validate()?;
        if self.model.patch > d.height.min(d.width) {
            return bad(format!(
                "model.patch {} exceeds image size {}x{}",
                self.model.patch, d.height, d.width
            ));
        }
        let t = &self.training;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("training.lr must be positive, got {}", t.lr));
        }
        if t.batch == 0 {
            return bad("training.batch must be >= 1".into());
        }
        if t.epochs == 0 {
            return bad("training.epochs must be >= 1".into());
        }
        if t.patience == 0 {
            return bad("training.patience must be >= 1".into());
        }
        if t.patches_per_sample == 0 {
            return bad("training.patches_per_sample must be >= 1".into());
        }
        let e = &self.evaluation;
        if e.k == 0 {
            return bad("evaluation.k must be >= 1".into());
        }
        let stride_unit = 1usize << self.model.levels;
        if e.tile == 0 || e.tile % stride_unit != 0 {
            return bad(format!(
                "evaluation.tile must be a positive multiple of 2^levels = {stride_unit}, got {}",
                e.tile
            ));
        }
        if 2 * e.pad >= e.tile {
            return bad(format!(
                "evaluation.pad must satisfy 2*pad < tile, got pad {} tile {}",
                e.pad, e.tile
            ));
        }
        if e.bins < 2 {
            return bad(format!("evaluation.bins must be >= 2, got {}", e.bins));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VsplitError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| VsplitError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
