//! Road-surface depth from inverse projection onto the vehicle ground plane
//! `z_v = 0`, and occlusion completion beneath masked movers.

use std::io::{Read, Write};

use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, ExtrinsicCalibration, Pose, Vec3};
use crate::semantics::SemanticMask;

/// Intersection parameters at or below this are treated as parallel rays.
pub const MIN_INTERSECTION_T: f64 = 1e-6;
pub const DEFAULT_MAX_DEPTH: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundHit {
    /// Distance from the camera centre to the ground point, meters.
    pub depth: f64,
    pub point_vehicle: Vec3,
    pub point_world: Vec3,
}

/// Solves the projection equation for `(x_v, y_v)` with `z_v = 0`.
///
/// Returns `None` for rays that are parallel to the plane, point away from
/// it, or meet it beyond `max_depth`.
pub fn inverse_project_ground(
    k: &CameraIntrinsics,
    extr: &ExtrinsicCalibration,
    vehicle_pose: &Pose,
    u: f64,
    v: f64,
    max_depth: f64,
) -> Option<GroundHit> {
    let center = extr.camera_center();
    let dir = (extr.rotation().transpose() * k.unproject(u, v)).normalize();
    if dir.z.abs() < f64::EPSILON {
        return None;
    }
    let t = -center.z / dir.z;
    if !(t > MIN_INTERSECTION_T) || t > max_depth {
        return None;
    }
    let point_vehicle = center + dir * t;
    Some(GroundHit {
        depth: t,
        point_vehicle: Vec3::new(point_vehicle.x, point_vehicle.y, 0.0),
        point_world: vehicle_pose.to_world(&Vec3::new(point_vehicle.x, point_vehicle.y, 0.0)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthSource {
    Invalid,
    ObservedGround,
    OcclusionFilled,
}

impl DepthSource {
    fn code(self) -> u8 {
        match self {
            DepthSource::Invalid => 0,
            DepthSource::ObservedGround => 1,
            DepthSource::OcclusionFilled => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => DepthSource::Invalid,
            1 => DepthSource::ObservedGround,
            2 => DepthSource::OcclusionFilled,
            _ => return Err(Error::parse("depth validity", format!("code {c}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundDepthMap {
    width: u32,
    height: u32,
    depth: Vec<f64>,
    source: Vec<DepthSource>,
}

impl GroundDepthMap {
    pub fn empty(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            depth: vec![f64::NAN; n],
            source: vec![DepthSource::Invalid; n],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        (self.source[index] != DepthSource::Invalid).then_some(self.depth[index])
    }

    pub fn at(&self, x: u32, y: u32) -> Option<f64> {
        self.get(y as usize * self.width as usize + x as usize)
    }

    pub fn source(&self, index: usize) -> DepthSource {
        self.source[index]
    }

    pub fn set(&mut self, index: usize, depth: f64, source: DepthSource) {
        debug_assert!(depth > 0.0 && depth.is_finite());
        self.depth[index] = depth;
        self.source[index] = source;
    }

    pub fn valid_count(&self) -> usize {
        self.source.iter().filter(|s| **s != DepthSource::Invalid).count()
    }

    pub fn count(&self, source: DepthSource) -> usize {
        self.source.iter().filter(|s| **s == source).count()
    }

    /// `(pixel index, depth)` for every valid pixel.
    pub fn valid_pixels(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.depth.len()).filter_map(|i| self.get(i).map(|d| (i, d)))
    }

    /// Writes the float32 raster: magic `SFDM`, width, height (u32 LE), then
    /// `width*height` little-endian f32 depths with NaN for invalid pixels.
    pub fn write_raster(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(b"SFDM")?;
        w.write_all(&self.width.to_le_bytes())?;
        w.write_all(&self.height.to_le_bytes())?;
        for (d, s) in self.depth.iter().zip(&self.source) {
            let v = if *s == DepthSource::Invalid { f32::NAN } else { *d as f32 };
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Validity sidecar: one byte per pixel (0 invalid, 1 observed, 2 filled).
    pub fn validity_bytes(&self) -> Vec<u8> {
        self.source.iter().map(|s| s.code()).collect()
    }

    pub fn read(mut raster: impl Read, validity: &[u8]) -> Result<Self> {
        let mut head = [0u8; 12];
        raster.read_exact(&mut head)?;
        if &head[..4] != b"SFDM" {
            return Err(Error::parse("depth raster", "bad magic"));
        }
        let width = u32::from_le_bytes(head[4..8].try_into().unwrap());
        let height = u32::from_le_bytes(head[8..12].try_into().unwrap());
        let n = width as usize * height as usize;
        if validity.len() != n {
            return Err(Error::parse("depth validity", "size mismatch"));
        }
        let mut buf = vec![0u8; 4 * n];
        raster.read_exact(&mut buf)?;
        let mut map = Self::empty(width, height);
        for i in 0..n {
            let src = DepthSource::from_code(validity[i])?;
            if src != DepthSource::Invalid {
                let d = f32::from_le_bytes(buf[4 * i..4 * i + 4].try_into().unwrap()) as f64;
                if !(d > 0.0 && d.is_finite()) {
                    return Err(Error::parse("depth raster", format!("invalid depth at pixel {i}")));
                }
                map.set(i, d, src);
            }
        }
        Ok(map)
    }
}

/// Depth for every ground-labelled pixel whose ray meets the road plane.
pub fn build_ground_depth_map(image: &ImageRecord, max_depth: f64) -> GroundDepthMap {
    let k = image.intrinsics();
    let pose = image.best_pose();
    let mut map = GroundDepthMap::empty(k.width, k.height);
    for y in 0..k.height {
        for x in 0..k.width {
            let i = y as usize * k.width as usize + x as usize;
            if !image.mask.is_ground_at(i) {
                continue;
            }
            if let Some(hit) = inverse_project_ground(k, &image.camera.extrinsics, pose, x as f64, y as f64, max_depth) {
                map.set(i, hit.depth, DepthSource::ObservedGround);
            }
        }
    }
    map
}

/// Fills moving-object pixels with the analytic depth of the road plane
/// beneath them. Pixels that already hold a depth are left untouched.
pub fn complete_occlusions(
    map: &GroundDepthMap,
    mask: &SemanticMask,
    k: &CameraIntrinsics,
    extr: &ExtrinsicCalibration,
    vehicle_pose: &Pose,
    max_depth: f64,
) -> GroundDepthMap {
    let mut out = map.clone();
    for y in 0..map.height {
        for x in 0..map.width {
            let i = y as usize * map.width as usize + x as usize;
            if out.source[i] != DepthSource::Invalid || !mask.is_dynamic_at(i) {
                continue;
            }
            if let Some(hit) = inverse_project_ground(k, extr, vehicle_pose, x as f64, y as f64, max_depth) {
                out.set(i, hit.depth, DepthSource::OcclusionFilled);
            }
        }
    }
    out
}

/// Convenience wrapper over [`complete_occlusions`] for a dataset record.
pub fn complete_record_occlusions(map: &GroundDepthMap, image: &ImageRecord, max_depth: f64) -> GroundDepthMap {
    complete_occlusions(
        map,
        &image.mask,
        image.intrinsics(),
        &image.camera.extrinsics,
        image.best_pose(),
        max_depth,
    )
}
