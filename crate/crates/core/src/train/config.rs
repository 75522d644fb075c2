//! Training configuration. Every field has a default, so an empty TOML file
//! is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::plane_estimation::PlaneEstimationConfig;

/// Exponentially decaying learning rate from `start` to `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrRange {
    pub start: f64,
    pub end: f64,
}

impl LrRange {
    pub const fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn at(&self, step: usize, total: usize) -> f64 {
        lr_schedule(self.start, self.end, step, total)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.end > 0.0 && self.start >= self.end && self.start.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{name}: need start >= end > 0, got start {} end {}",
                self.start, self.end
            )))
        }
    }
}

/// `start * (end / start)^(step / total)`; `start` when `total` is zero.
pub fn lr_schedule(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return start;
    }
    let t = (step.min(total)) as f64 / total as f64;
    start * (end / start).powf(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianLr {
    /// Position rate, multiplied by the scene scale, decayed over stages 1 and 3.
    pub position: LrRange,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub label: f64,
}

impl Default for GaussianLr {
    fn default() -> Self {
        Self {
            position: LrRange::new(1.6e-4, 1.6e-6),
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
            label: 5e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub from_step: usize,
    pub until_step: usize,
    pub interval: usize,
    /// Threshold on the mean screen-space positional gradient, in NDC units.
    pub grad_threshold: f64,
    /// Gaussians larger than this fraction of the scene scale are split,
    /// smaller ones cloned.
    pub percent_dense: f64,
    pub opacity_floor: f64,
    /// World-size pruning threshold as a fraction of the scene scale.
    pub prune_scale_fraction: f64,
    /// World-size pruning is only active after this step.
    pub prune_large_after: usize,
    /// Opacity reset period (0 disables).
    pub opacity_reset_interval: usize,
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            from_step: 500,
            until_step: 15_000,
            interval: 100,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            opacity_floor: 0.005,
            prune_scale_fraction: 0.1,
            prune_large_after: 3000,
            opacity_reset_interval: 3000,
            max_gaussians: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
    pub tau: f64,
    pub weights: LossWeights,
    pub plane_lr_stage2: LrRange,
    pub plane_lr_stage3: LrRange,
    pub lr: GaussianLr,
    pub densify: DensifyConfig,
    pub plane_estimation: PlaneEstimationConfig,
    pub sh_degree: usize,
    pub seed: u64,
    /// Background color for every render.
    pub background: [f64; 3],
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            s1: 20_000,
            s2: 1_000,
            s3: 9_000,
            tau: 0.1,
            weights: LossWeights::default(),
            plane_lr_stage2: LrRange::new(1.6e-4, 1.6e-6),
            plane_lr_stage3: LrRange::new(1.6e-6, 1.6e-8),
            lr: GaussianLr::default(),
            densify: DensifyConfig::default(),
            plane_estimation: PlaneEstimationConfig::default(),
            sh_degree: 3,
            seed: 0,
            background: [0.0; 3],
        }
    }
}

impl TrainingConfig {
    /// Rasterizer settings with this config's background.
    pub fn raster_settings(&self) -> crate::raster::RasterSettings {
        crate::raster::RasterSettings {
            background: nalgebra::Vector3::from(self.background),
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.plane_lr_stage2.validate("plane_lr_stage2")?;
        self.plane_lr_stage3.validate("plane_lr_stage3")?;
        self.lr.position.validate("lr.position")?;
        if !(self.tau >= 0.0) {
            return Err(Error::Config(format!("tau = {} must be >= 0", self.tau)));
        }
        if self.sh_degree > crate::model::sh::MAX_SH_DEGREE {
            return Err(Error::Config(format!("sh_degree = {} exceeds 3", self.sh_degree)));
        }
        for (v, name) in [
            (self.lr.sh_dc, "lr.sh_dc"),
            (self.lr.sh_rest, "lr.sh_rest"),
            (self.lr.opacity, "lr.opacity"),
            (self.lr.scale, "lr.scale"),
            (self.lr.rotation, "lr.rotation"),
            (self.lr.label, "lr.label"),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be a finite non-negative rate")));
            }
        }
        if self.densify.interval == 0 {
            return Err(Error::Config("densify.interval must be positive".into()));
        }
        Ok(())
    }
}
