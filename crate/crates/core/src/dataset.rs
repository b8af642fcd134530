//! In-memory dataset records: images, cameras and sequence keys.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, ExtrinsicCalibration, Pose, Vec3};
use crate::semantics::SemanticMask;

/// Linear RGB raster, values in `[0, 1]`, row-major interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width as usize * height as usize {
            return Err(Error::InvalidArgument(format!(
                "{} samples for a {width}x{height} RGB raster",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel value outside [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, color: [f64; 3]) -> Self {
        let data = (0..width as usize * height as usize).flat_map(|_| color).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).map(|c| c.clamp(0.0, 1.0)));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, index: usize) -> [f64; 3] {
        [self.data[3 * index], self.data[3 * index + 1], self.data[3 * index + 2]]
    }

    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.pixel(y as usize * self.width as usize + x as usize)
    }

    pub fn set(&mut self, x: u32, y: u32, c: [f64; 3]) {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        for k in 0..3 {
            self.data[i + k] = c[k].clamp(0.0, 1.0);
        }
    }

    /// Rec. 601 luma plane.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Sequence identity: all frames of one camera on one trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AppearanceKey {
    pub trip: u32,
    pub camera: u32,
}

impl AppearanceKey {
    pub fn new(trip: u32, camera: u32) -> Self {
        Self { trip, camera }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub id: u32,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: ExtrinsicCalibration,
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub trip: u32,
    pub camera: Arc<CameraModel>,
    pub timestamp: f64,
    pub pixels: RgbImage,
    pub mask: SemanticMask,
    /// Meter-level vehicle pose from the positioning system.
    pub prior_pose: Pose,
    /// Vehicle pose after reconstruction, when available.
    pub refined_pose: Option<Pose>,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        let k = &self.camera.intrinsics;
        let img = (self.pixels.width(), self.pixels.height());
        if img != (k.width, k.height) {
            return Err(Error::Ingest {
                image_id: self.id.clone(),
                message: format!("raster {img:?} does not match camera {}x{}", k.width, k.height),
            });
        }
        let mask = (self.mask.width(), self.mask.height());
        if mask != img {
            return Err(Error::MaskMismatch { mask, image: img });
        }
        if !self.timestamp.is_finite() {
            return Err(Error::Ingest {
                image_id: self.id.clone(),
                message: "non-finite timestamp".into(),
            });
        }
        Ok(())
    }

    pub fn sequence(&self) -> AppearanceKey {
        AppearanceKey::new(self.trip, self.camera.id)
    }

    /// Refined pose when present, otherwise the prior.
    pub fn best_pose(&self) -> &Pose {
        self.refined_pose.as_ref().unwrap_or(&self.prior_pose)
    }

    pub fn position(&self) -> Vec3 {
        self.best_pose().position()
    }

    pub fn camera_pose(&self) -> Pose {
        self.best_pose().camera_pose(&self.camera.extrinsics)
    }

    pub fn view_direction(&self) -> Vec3 {
        self.camera_pose().view_direction()
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.camera.intrinsics
    }
}
