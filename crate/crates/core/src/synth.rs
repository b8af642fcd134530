//! Procedural street scenes with exact colour, depth and label oracles.
//!
//! A scene is a textured ground plane at `z = 0`, axis-aligned boxes and a
//! constant sky. Vehicles drive along the x axis; each trip may add its own
//! moving boxes and a multiplicative colour tint per camera sequence.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AppearanceKey, CameraModel, ImageRecord, RgbImage};
use crate::error::Result;
use crate::geometry::{pixel_to_ray, CameraIntrinsics, ExtrinsicCalibration, Pose, Ray, Vec3};
use crate::semantics::{LabelTable, SemanticClass, SemanticMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub color: [f64; 3],
    pub class: SemanticClass,
    /// Present only on this trip; `None` means always present.
    pub trip: Option<u32>,
}

/// Window pattern on vertical building faces: darker cells on a 1.5 m grid.
fn facade(p: &Vec3, axis: usize) -> f64 {
    const CELL: f64 = 1.5;
    let u = if axis == 0 { p.y } else { p.x };
    let (fu, fz) = ((u / CELL).rem_euclid(1.0), (p.z / CELL).rem_euclid(1.0));
    if p.z > 0.75 && (0.25..0.75).contains(&fu) && (0.3..0.8).contains(&fz) {
        0.55
    } else {
        1.0
    }
}

impl SceneBox {
    pub fn new(min: [f64; 3], max: [f64; 3], color: [f64; 3], class: SemanticClass) -> Self {
        Self {
            min,
            max,
            color,
            class,
            trip: None,
        }
    }

    /// Slab test; returns the entry distance and the axis of the entry face.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, usize)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        let mut axis = 0;
        for a in 0..3 {
            let o = ray.origin[a];
            let d = ray.direction[a];
            if d.abs() < 1e-15 {
                if o < self.min[a] || o > self.max[a] {
                    return None;
                }
                continue;
            }
            let (mut n, mut f) = ((self.min[a] - o) / d, (self.max[a] - o) / d);
            if n > f {
                std::mem::swap(&mut n, &mut f);
            }
            if n > t0 {
                t0 = n;
                axis = a;
            }
            t1 = t1.min(f);
        }
        (t0 <= t1 && t0 > 0.0).then_some((t0, axis))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Edge length of the ground checkerboard squares, meters.
    pub checker: f64,
    pub ground_colors: [[f64; 3]; 2],
    /// Half width of the painted centre line at `y = 0`.
    pub lane_half_width: f64,
    pub lane_color: [f64; 3],
    pub sky_color: [f64; 3],
    pub boxes: Vec<SceneBox>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub color: [f64; 3],
    /// Distance along the unit ray; infinite for sky.
    pub depth: f64,
    pub class: SemanticClass,
}

impl Scene {
    /// Road with a checker texture, a centre line, buildings on both sides
    /// between `|y| = 7` and `|y| = 11`, and end walls at `|x| = 34`.
    pub fn street(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut boxes = Vec::new();
        for side in [-1.0, 1.0] {
            let mut x = -30.0;
            while x < 30.0 {
                let len = rng.gen_range(6.0..10.0);
                let h = rng.gen_range(3.0..7.0);
                let depth = rng.gen_range(2.0..4.0);
                let (y0, y1) = if side > 0.0 { (7.0, 7.0 + depth) } else { (-7.0 - depth, -7.0) };
                let color = [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)];
                boxes.push(SceneBox::new([x, y0, 0.0], [x + len, y1, h], color, SemanticClass::Building));
                x += len + rng.gen_range(0.5..2.0);
            }
        }
        for (x0, x1) in [(-36.0, -34.0), (34.0, 36.0)] {
            let color = [rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8)];
            boxes.push(SceneBox::new([x0, -12.0, 0.0], [x1, 12.0, 8.0], color, SemanticClass::Building));
        }
        Self {
            checker: 2.0,
            ground_colors: [[0.28, 0.28, 0.30], [0.52, 0.50, 0.46]],
            lane_half_width: 0.15,
            lane_color: [0.95, 0.95, 0.9],
            sky_color: [0.55, 0.7, 0.9],
            boxes,
        }
    }

    pub fn with_box(mut self, b: SceneBox) -> Self {
        self.boxes.push(b);
        self
    }

    fn ground(&self, p: &Vec3) -> ([f64; 3], SemanticClass) {
        if p.y.abs() <= self.lane_half_width {
            return (self.lane_color, SemanticClass::Lane);
        }
        let cx = (p.x / self.checker).floor() as i64;
        let cy = (p.y / self.checker).floor() as i64;
        (self.ground_colors[(cx + cy).rem_euclid(2) as usize], SemanticClass::Road)
    }

    fn trace_filtered(&self, ray: &Ray, keep: impl Fn(&SceneBox) -> bool) -> Hit {
        let mut best = Hit {
            color: self.sky_color,
            depth: f64::INFINITY,
            class: SemanticClass::Sky,
        };
        if ray.direction.z < 0.0 && ray.origin.z > 0.0 {
            let t = -ray.origin.z / ray.direction.z;
            let (color, class) = self.ground(&ray.at(t));
            best = Hit { color, depth: t, class };
        }
        for b in self.boxes.iter().filter(|b| keep(b)) {
            if let Some((t, axis)) = b.intersect(ray) {
                if t < best.depth {
                    // Shade by face orientation so edges stay visible.
                    let mut shade = [0.8, 0.9, 1.0][axis];
                    if b.class == SemanticClass::Building && axis != 2 {
                        shade *= facade(&ray.at(t), axis);
                    }
                    best = Hit {
                        color: b.color.map(|c| c * shade),
                        depth: t,
                        class: b.class,
                    };
                }
            }
        }
        best
    }

    /// Scene as seen on `trip`: permanent boxes plus that trip's movers.
    pub fn trace(&self, ray: &Ray, trip: u32) -> Hit {
        self.trace_filtered(ray, |b| b.trip.map_or(true, |t| t == trip))
    }

    /// Scene with every dynamic-class box removed.
    pub fn trace_static(&self, ray: &Ray) -> Hit {
        self.trace_filtered(ray, |b| b.trip.is_none() && !b.class.is_dynamic_by_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub camera_height: f64,
    pub camera_pitch: f64,
    /// Cameras per vehicle, at evenly spread yaw offsets.
    pub cameras: u32,
    pub camera_yaw_spread: f64,
    pub n_trips: u32,
    pub images_per_trip: u32,
    pub start_x: f64,
    pub spacing: f64,
    /// Lateral position of each trip is drawn from `±lane_offset`.
    pub lane_offset: f64,
    /// Per-channel tint factors are drawn from `1 ± tint_strength`.
    pub tint_strength: f64,
    pub movers_per_trip: u32,
    pub prior_translation_noise: f64,
    pub prior_rotation_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 80,
            height: 60,
            focal: 60.0,
            camera_height: 1.5,
            camera_pitch: 0.15,
            cameras: 1,
            camera_yaw_spread: 0.6,
            n_trips: 4,
            images_per_trip: 12,
            start_x: -16.0,
            spacing: 2.5,
            lane_offset: 2.0,
            tint_strength: 0.0,
            movers_per_trip: 0,
            prior_translation_noise: 1.5,
            prior_rotation_noise: 1f64.to_radians(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::centered(self.focal, self.width, self.height)
    }

    pub fn camera_models(&self) -> Result<Vec<Arc<CameraModel>>> {
        let k = self.intrinsics()?;
        Ok((0..self.cameras)
            .map(|id| {
                let yaw = if self.cameras == 1 {
                    0.0
                } else {
                    self.camera_yaw_spread * (id as f64 / (self.cameras - 1) as f64 - 0.5)
                };
                let mount = ExtrinsicCalibration::forward_camera(Vec3::new(1.0, 0.0, self.camera_height), self.camera_pitch);
                // Yawing the mount about the vehicle z axis.
                let rz = Pose::planar_vehicle(0.0, 0.0, yaw);
                let rotation = mount.rotation() * rz.rotation().transpose();
                let extr = ExtrinsicCalibration::new(rotation, -(rotation * Vec3::new(1.0, 0.0, self.camera_height)))
                    .expect("product of rotations");
                Arc::new(CameraModel {
                    id,
                    intrinsics: k,
                    extrinsics: extr,
                })
            })
            .collect())
    }
}

/// A timed xy path on the ground.
pub use crate::nav::GuidanceTrajectory as Trajectory;

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub cameras: Vec<Arc<CameraModel>>,
    pub images: Vec<ImageRecord>,
    pub tints: BTreeMap<AppearanceKey, [f64; 3]>,
    pub trajectories: Vec<Trajectory>,
    pub labels: Arc<LabelTable>,
}

/// Renders the oracle colour, depth and label images for a camera.
pub fn render_oracle(
    scene: &Scene,
    camera_pose: &Pose,
    k: &CameraIntrinsics,
    trip: Option<u32>,
) -> (Vec<[f64; 3]>, Vec<f64>, Vec<SemanticClass>) {
    let n = k.pixel_count();
    let (mut color, mut depth, mut class) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for v in 0..k.height {
        for u in 0..k.width {
            let ray = pixel_to_ray(camera_pose, k, u as f64, v as f64);
            let hit = match trip {
                Some(t) => scene.trace(&ray, t),
                None => scene.trace_static(&ray),
            };
            color.push(hit.color);
            depth.push(hit.depth);
            class.push(hit.class);
        }
    }
    (color, depth, class)
}

/// True vehicle pose of frame `i` on `trip`, shared by training and
/// evaluation harnesses so held-out views sit on the same drive lines.
pub fn trip_lane(cfg: &SynthConfig, trip: u32) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1a4e);
    rng.set_stream(trip as u64);
    rng.gen_range(-cfg.lane_offset..=cfg.lane_offset)
}

pub fn trip_tint(cfg: &SynthConfig, key: AppearanceKey) -> [f64; 3] {
    if cfg.tint_strength == 0.0 {
        return [1.0; 3];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7147);
    rng.set_stream(((key.trip as u64) << 32) | key.camera as u64);
    let s = cfg.tint_strength;
    [rng.gen_range(1.0 - s..1.0 + s), rng.gen_range(1.0 - s..1.0 + s), rng.gen_range(1.0 - s..1.0 + s)]
}

pub fn vehicle_pose(cfg: &SynthConfig, trip: u32, frame: f64) -> Pose {
    Pose::planar_vehicle(cfg.start_x + frame * cfg.spacing, trip_lane(cfg, trip), 0.0)
}

/// Random vehicle-sized box on the road for `trip`.
fn mover_box(rng: &mut ChaCha8Rng, cfg: &SynthConfig, trip: u32) -> SceneBox {
    let x = rng.gen_range(cfg.start_x + 4.0..cfg.start_x + 4.0 + cfg.images_per_trip as f64 * cfg.spacing);
    let y = rng.gen_range(-5.0..5.0);
    let color = [rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)];
    SceneBox {
        min: [x, y - 0.9, 0.0],
        max: [x + 4.2, y + 0.9, 1.5],
        color,
        class: SemanticClass::Vehicle,
        trip: Some(trip),
    }
}

/// Generates `cfg.n_trips` drives through `scene`. Movers for each trip are
/// added to the returned scene so oracle queries see them.
pub fn make_trips(scene: &Scene, cfg: &SynthConfig) -> Result<(Scene, SynthDataset)> {
    let labels = Arc::new(LabelTable::default());
    let cameras = cfg.camera_models()?;
    let mut scene = scene.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for trip in 0..cfg.n_trips {
        for _ in 0..cfg.movers_per_trip {
            scene.boxes.push(mover_box(&mut rng, cfg, trip));
        }
    }
    let mut images = Vec::new();
    let mut tints = BTreeMap::new();
    let mut trajectories = Vec::new();
    for trip in 0..cfg.n_trips {
        let mut points = Vec::new();
        for cam in &cameras {
            tints.insert(AppearanceKey::new(trip, cam.id), trip_tint(cfg, AppearanceKey::new(trip, cam.id)));
        }
        for i in 0..cfg.images_per_trip {
            let pose = vehicle_pose(cfg, trip, i as f64);
            let timestamp = trip as f64 * 1000.0 + i as f64 * 0.5;
            points.push((timestamp, pose.position().x, pose.position().y));
            let noise_t = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                0.0,
            ) * (cfg.prior_translation_noise / 2f64.sqrt());
            let noise_r = Vec3::new(0.0, 0.0, rng.gen_range(-1.0..1.0) * cfg.prior_rotation_noise);
            let prior = pose.perturbed(noise_t, noise_r);
            for cam in &cameras {
                let key = AppearanceKey::new(trip, cam.id);
                let tint = tints[&key];
                let (color, _, class) = render_oracle(&scene, &pose.camera_pose(&cam.extrinsics), &cam.intrinsics, Some(trip));
                let data = color
                    .iter()
                    .flat_map(|c| [c[0] * tint[0], c[1] * tint[1], c[2] * tint[2]])
                    .map(|v| v.clamp(0.0, 1.0))
                    .collect();
                let ids = class.iter().map(|c| labels.id_of(*c).expect("default table has every class")).collect();
                let k = &cam.intrinsics;
                images.push(ImageRecord {
                    id: format!("t{trip:02}_c{}_f{i:03}", cam.id),
                    trip,
                    camera: cam.clone(),
                    timestamp,
                    pixels: RgbImage::new(k.width, k.height, data)?,
                    mask: SemanticMask::new(k.width, k.height, ids, labels.clone())?,
                    prior_pose: prior,
                    refined_pose: Some(pose),
                });
            }
        }
        trajectories.push(Trajectory { trip, points });
    }
    Ok((
        scene,
        SynthDataset {
            cameras,
            images,
            tints,
            trajectories,
            labels,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ground::{build_ground_depth_map, DEFAULT_MAX_DEPTH};

    #[test]
    fn ground_ray_hits_checker() {
        let scene = Scene::street(0);
        let ray = Ray::new(Vec3::new(0.5, 3.0, 2.0), Vec3::new(0.0, 0.0, -1.0), 0.0, f64::INFINITY).unwrap();
        let hit = scene.trace_static(&ray);
        assert_eq!(hit.depth, 2.0);
        assert_eq!(hit.class, SemanticClass::Road);
        assert_eq!(hit.color, scene.ground_colors[1]);
    }

    #[test]
    fn box_face_depth() {
        let scene = Scene {
            boxes: vec![SceneBox::new([5.0, -1.0, 0.0], [6.0, 1.0, 3.0], [0.5; 3], SemanticClass::Building)],
            ..Scene::street(0)
        };
        let ray = Ray::new(Vec3::new(0.0, 0.0, 1.0), Vec3::x(), 0.0, f64::INFINITY).unwrap();
        let hit = scene.trace_static(&ray);
        assert!((hit.depth - 5.0).abs() < 1e-12);
        assert_eq!(hit.class, SemanticClass::Building);
        let up = Ray::new(Vec3::new(0.0, 0.0, 1.0), Vec3::z(), 0.0, f64::INFINITY).unwrap();
        let sky = scene.trace_static(&up);
        assert!(sky.depth.is_infinite());
        assert_eq!(sky.color, scene.sky_color);
    }

    #[test]
    fn untinted_images_equal_oracle() {
        let cfg = SynthConfig {
            n_trips: 1,
            images_per_trip: 2,
            ..Default::default()
        };
        let (scene, data) = make_trips(&Scene::street(1), &cfg).unwrap();
        let img = &data.images[1];
        let (color, _, _) = render_oracle(&scene, &img.camera_pose(), img.intrinsics(), Some(0));
        for (i, c) in color.iter().enumerate() {
            assert_eq!(img.pixels.pixel(i), *c);
        }
        assert!(make_trips(&scene, &SynthConfig { n_trips: 0, ..cfg }).unwrap().1.images.is_empty());
    }

    #[test]
    fn ground_depth_agrees_with_inverse_projection() {
        let cfg = SynthConfig {
            n_trips: 2,
            images_per_trip: 3,
            cameras: 2,
            ..Default::default()
        };
        let (scene, data) = make_trips(&Scene::street(2), &cfg).unwrap();
        for img in &data.images {
            let (_, depth, _) = render_oracle(&scene, &img.camera_pose(), img.intrinsics(), Some(img.trip));
            let map = build_ground_depth_map(img, DEFAULT_MAX_DEPTH);
            assert!(map.valid_count() > 0);
            for (i, d) in map.valid_pixels() {
                assert!((d - depth[i]).abs() <= 1e-6 * depth[i], "pixel {i}: {d} vs {}", depth[i]);
            }
        }
    }

    #[test]
    fn mover_mask_matches_projected_area() {
        let cfg = SynthConfig {
            n_trips: 1,
            images_per_trip: 1,
            width: 160,
            height: 120,
            focal: 120.0,
            ..Default::default()
        };
        let pose = vehicle_pose(&cfg, 0, 0.0);
        let c = pose.position();
        let mover = SceneBox {
            min: [c.x + 5.0, c.y - 1.0, 0.0],
            max: [c.x + 9.0, c.y + 1.0, 1.2],
            color: [0.9, 0.1, 0.1],
            class: SemanticClass::Vehicle,
            trip: Some(0),
        };
        let scene = Scene {
            boxes: vec![mover.clone()],
            ..Scene::street(0)
        };
        let (_, data) = make_trips(&scene, &cfg).unwrap();
        let img = &data.images[0];
        let fraction = img.mask.dynamic_fraction();
        // Independent route: supersampled point-in-box test on a 4x4 grid
        // of rays per pixel.
        let k = img.intrinsics();
        let cam = img.camera_pose();
        let mut covered = 0.0;
        for v in 0..k.height {
            for u in 0..k.width {
                for s in 0..16 {
                    let du = (s % 4) as f64 / 4.0 - 0.375;
                    let dv = (s / 4) as f64 / 4.0 - 0.375;
                    let ray = pixel_to_ray(&cam, k, u as f64 + du, v as f64 + dv);
                    if mover.intersect(&ray).is_some() {
                        covered += 1.0 / 16.0;
                    }
                }
            }
        }
        let expected = covered / k.pixel_count() as f64;
        assert!(fraction > 0.0);
        assert!((fraction - expected).abs() <= 0.01 * expected, "{fraction} vs {expected}");
    }
}
