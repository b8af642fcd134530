//! TOML configuration for the whole pipeline. Every section and key is
//! optional; missing values take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::nav::MarkerStyle;
use crate::render::RenderSettings;
use crate::selection::SelectionConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    /// Side of each square block, in meters.
    pub block_side: f64,
    /// Fraction of a block shared with each neighbour.
    pub overlap: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            block_side: 200.0,
            overlap: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    /// Largest accepted `width * height` for a render request.
    pub max_pixels: u64,
    /// Horizontal field of view used when a request carries no intrinsics.
    pub default_fov_deg: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            max_pixels: 1 << 22,
            default_fov_deg: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub selection: SelectionConfig,
    pub partition: PartitionConfig,
    pub field: FieldConfig,
    pub train: TrainConfig,
    pub marker: MarkerStyle,
    pub render: RenderSettings,
    pub service: ServiceConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::parse("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    /// Defaults when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::parse("config", e))
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.train.validate()?;
        self.marker.validate()?;
        let p = &self.partition;
        if !(p.block_side > 0.0 && p.block_side.is_finite()) || !(0.0..1.0).contains(&p.overlap) {
            return Err(Error::InvalidArgument(format!(
                "partition: block_side {} must be positive and overlap {} in [0, 1)",
                p.block_side, p.overlap
            )));
        }
        if !(self.service.default_fov_deg > 0.0 && self.service.default_fov_deg < 180.0) {
            return Err(Error::InvalidArgument(format!(
                "service: default_fov_deg {} outside (0, 180)",
                self.service.default_fov_deg
            )));
        }
        Ok(())
    }
}
