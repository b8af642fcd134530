//! Camera models, rigid poses and rays.
//!
//! Conventions used throughout the crate:
//!
//! - World frame is z-up; the road surface is the plane `z = 0`.
//! - Vehicle frame: x forward, y left, z up, origin on the ground.
//! - Camera frame: x right, y down, z along the optical axis.
//! - Pixel coordinates `(u, v)` address pixel centres, so pixel column `i`
//!   sits at `u = i`. `u` runs along the width, `v` along the height.

use nalgebra::{Matrix3, Matrix3x4, Rotation3, Unit, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ROTATION_TOL: f64 = 1e-9;
/// Camera-frame depth below which a point counts as behind the camera.
const MIN_CAMERA_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the image centre.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("zero image size".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Camera-frame direction (not normalised) through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Perspective projection of a camera-frame point.
    pub fn project_camera_point(&self, p: &Vec3) -> Result<(f64, f64)> {
        if p.z <= MIN_CAMERA_DEPTH {
            return Err(Error::BehindCamera(p.z));
        }
        Ok((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Same camera with the image resampled to `width x height`.
    pub fn scaled_to(&self, width: u32, height: u32) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(
            self.fx * sx,
            self.fy * sy,
            (self.cx + 0.5) * sx - 0.5,
            (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        )
    }
}

fn rotation_error(r: &Mat3) -> f64 {
    let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

fn check_rotation(r: &Mat3) -> Result<()> {
    let err = rotation_error(r);
    if err.is_finite() && err <= ROTATION_TOL {
        Ok(())
    } else {
        Err(Error::NotARotation(err))
    }
}

/// Vehicle → camera transform: `p_cam = R_c * p_vehicle + t_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRigid", into = "RawRigid")]
pub struct ExtrinsicCalibration {
    rotation: Mat3,
    translation: Vec3,
}

impl ExtrinsicCalibration {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// A camera mounted at `position` (vehicle frame) looking forward along
    /// the vehicle x axis, pitched down by `pitch` radians.
    pub fn forward_camera(position: Vec3, pitch: f64) -> Self {
        let forward = Vec3::new(pitch.cos(), 0.0, -pitch.sin());
        let right = Vec3::new(0.0, -1.0, 0.0);
        let down = forward.cross(&right);
        // Rows are the camera axes expressed in vehicle coordinates.
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * position);
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// The 3x4 matrix `[R_c | t_c]`.
    pub fn matrix(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_camera(&self, p_vehicle: &Vec3) -> Vec3 {
        self.rotation * p_vehicle + self.translation
    }

    /// Camera centre in vehicle coordinates.
    pub fn camera_center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera → vehicle as a pose.
    pub fn camera_in_vehicle(&self) -> Pose {
        Pose {
            rotation: self.rotation.transpose(),
            translation: self.camera_center(),
            frame: PoseFrame::Camera,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseFrame {
    Vehicle,
    Camera,
}

/// Placement of a body (vehicle or camera) in the world.
///
/// `rotation` maps body axes into world axes and `translation` is the body
/// origin in world coordinates, so `p_world = R * p_body + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPose", into = "RawPose")]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
    frame: PoseFrame,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3, frame: PoseFrame) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pose translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
            frame,
        })
    }

    pub fn identity(frame: PoseFrame) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            frame,
        }
    }

    /// Vehicle pose on the ground plane with heading `yaw` about world z.
    pub fn planar_vehicle(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation: Vec3::new(x, y, 0.0),
            frame: PoseFrame::Vehicle,
        }
    }

    /// Camera pose at `eye` looking at `target` with world z as up.
    pub fn look_at(eye: Vec3, target: Vec3) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("look_at target equals eye".into()))?;
        let right = forward
            .cross(&Vec3::z())
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("look_at direction is vertical".into()))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        Ok(Self {
            rotation,
            translation: eye,
            frame: PoseFrame::Camera,
        })
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn frame(&self) -> PoseFrame {
        self.frame
    }

    pub fn position(&self) -> Vec3 {
        self.translation
    }

    pub fn to_world(&self, p_body: &Vec3) -> Vec3 {
        self.rotation * p_body + self.translation
    }

    pub fn to_body(&self, p_world: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p_world - self.translation)
    }

    /// `self ∘ other`: applies `other` first. The result carries the frame
    /// tag of `other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            frame: other.frame,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
            frame: self.frame,
        }
    }

    /// World pose of a camera mounted on a vehicle at this pose.
    pub fn camera_pose(&self, extr: &ExtrinsicCalibration) -> Pose {
        let mut cam = self.compose(&extr.camera_in_vehicle());
        cam.frame = PoseFrame::Camera;
        cam
    }

    /// Geodesic angle between the two orientations, in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Heading of the body x axis for vehicles, optical axis for cameras.
    pub fn view_direction(&self) -> Vec3 {
        match self.frame {
            PoseFrame::Vehicle => self.rotation.column(0).into_owned(),
            PoseFrame::Camera => self.rotation.column(2).into_owned(),
        }
    }

    /// Applies a small rotation (axis-angle vector, radians) on the body side.
    pub fn perturbed(&self, translation: Vec3, rotvec: Vec3) -> Pose {
        let delta = Rotation3::from_scaled_axis(rotvec);
        Pose {
            rotation: self.rotation * delta.matrix(),
            translation: self.translation + translation,
            frame: self.frame,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    /// Builds a ray, normalising `direction`.
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Result<Self> {
        let direction = direction
            .try_normalize(1e-300)
            .ok_or_else(|| Error::InvalidArgument("zero ray direction".into()))?;
        if !(near >= 0.0 && near < far) {
            return Err(Error::InvalidArgument(format!("invalid ray bounds [{near}, {far}]")));
        }
        Ok(Self {
            origin,
            direction,
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn with_bounds(mut self, near: f64, far: f64) -> Self {
        debug_assert!(near >= 0.0 && near < far);
        self.near = near;
        self.far = far;
        self
    }
}

/// Ray through the centre of pixel `(u, v)` of a camera at `pose`.
///
/// The ray spans `[0, ∞)`; use [`Ray::with_bounds`] to clip it.
pub fn pixel_to_ray(pose: &Pose, k: &CameraIntrinsics, u: f64, v: f64) -> Ray {
    let dir_cam = k.unproject(u, v).normalize();
    Ray {
        origin: pose.translation,
        direction: pose.rotation * dir_cam,
        near: 0.0,
        far: f64::INFINITY,
    }
}

/// Projects a vehicle-frame point into the image: `[u v 1]ᵀ = λ K [R_c|t_c] p̃`.
///
/// Returns `(u, v, λ)`, with `λ` the reciprocal of the camera-frame depth.
pub fn project(k: &CameraIntrinsics, extr: &ExtrinsicCalibration, p_vehicle: &Vec3) -> Result<(f64, f64, f64)> {
    let p_cam = extr.to_camera(p_vehicle);
    let (u, v) = k.project_camera_point(&p_cam)?;
    Ok((u, v, 1.0 / p_cam.z))
}

/// Projects a world point through a camera placed at `camera_pose`.
pub fn project_world(k: &CameraIntrinsics, camera_pose: &Pose, p_world: &Vec3) -> Result<(f64, f64)> {
    k.project_camera_point(&camera_pose.to_body(p_world))
}

/// Homogeneous form `K [R|t]` used by callers that want a single 3x4 matrix.
pub fn projection_matrix(k: &CameraIntrinsics, extr: &ExtrinsicCalibration) -> Matrix3x4<f64> {
    k.matrix() * extr.matrix()
}

pub fn homogeneous(p: &Vec3) -> Vector4<f64> {
    Vector4::new(p.x, p.y, p.z, 1.0)
}

pub fn unit(v: Vec3) -> Option<Unit<Vec3>> {
    Unit::try_new(v, 1e-12)
}

#[derive(Serialize, Deserialize)]
struct RawRigid {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

fn mat_rows(m: &Mat3) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

fn mat_from_rows(r: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    )
}

impl From<ExtrinsicCalibration> for RawRigid {
    fn from(e: ExtrinsicCalibration) -> Self {
        RawRigid {
            rotation: mat_rows(&e.rotation),
            translation: e.translation.into(),
        }
    }
}

impl TryFrom<RawRigid> for ExtrinsicCalibration {
    type Error = Error;
    fn try_from(r: RawRigid) -> Result<Self> {
        ExtrinsicCalibration::new(mat_from_rows(&r.rotation), r.translation.into())
    }
}

#[derive(Serialize, Deserialize)]
struct RawPose {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    frame: PoseFrame,
}

impl From<Pose> for RawPose {
    fn from(p: Pose) -> Self {
        RawPose {
            rotation: mat_rows(&p.rotation),
            translation: p.translation.into(),
            frame: p.frame,
        }
    }
}

impl TryFrom<RawPose> for Pose {
    type Error = Error;
    fn try_from(r: RawPose) -> Result<Self> {
        Pose::new(mat_from_rows(&r.rotation), r.translation.into(), r.frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_k() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 4,
            height: 4,
        }
    }

    #[test]
    fn optical_axis_ray() {
        let ray = pixel_to_ray(&Pose::identity(PoseFrame::Camera), &unit_k(), 0.0, 0.0);
        assert!((ray.direction - Vec3::z()).norm() < 1e-15);
    }

    #[test]
    fn principal_point_ray() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let ray = pixel_to_ray(&Pose::identity(PoseFrame::Camera), &k, 50.0, 50.0);
        assert!((ray.direction - Vec3::z()).norm() < 1e-15);
    }

    #[test]
    fn project_direct_division() {
        let k = unit_k();
        let e = ExtrinsicCalibration::identity();
        let (u, v, _) = project(&k, &e, &Vec3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!((u, v), (0.0, 0.0));
        let (u, v, lambda) = project(&k, &e, &Vec3::new(1.0, 2.0, 2.0)).unwrap();
        assert_eq!((u, v), (0.5, 1.0));
        assert_eq!(lambda, 0.5);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let r = project(&unit_k(), &ExtrinsicCalibration::identity(), &Vec3::new(0.0, 0.0, -1.0));
        assert!(matches!(r, Err(Error::BehindCamera(_))));
    }

    #[test]
    fn rejects_bad_intrinsics_and_rotations() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 2, 2).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 5.0, 0.0, 2, 2).is_err());
        let skew = Mat3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(ExtrinsicCalibration::new(skew, Vec3::zeros()).is_err());
        let reflect = Mat3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Pose::new(reflect, Vec3::zeros(), PoseFrame::Camera).is_err());
    }

    #[test]
    fn forward_camera_is_a_rotation() {
        let e = ExtrinsicCalibration::forward_camera(Vec3::new(1.0, 0.0, 1.5), 0.2);
        assert!(rotation_error(e.rotation()) < 1e-12);
        assert!((e.camera_center() - Vec3::new(1.0, 0.0, 1.5)).norm() < 1e-12);
    }

    #[test]
    fn pose_serde_round_trip() {
        let p = Pose::planar_vehicle(3.0, -2.0, 0.7);
        let s = serde_json::to_string(&p).unwrap();
        let q: Pose = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-3.0f64..3.0),
            prop::array::uniform3(-50.0f64..50.0),
        )
            .prop_map(|(rv, t)| {
                Pose::identity(PoseFrame::Camera).perturbed(Vec3::from(t), Vec3::from(rv))
            })
    }

    proptest! {
        #[test]
        fn pose_inverse_is_exact(p in arb_pose()) {
            let id = p.compose(&p.inverse());
            prop_assert!((id.rotation - Mat3::identity()).abs().max() < 1e-9);
            prop_assert!(id.translation.norm() < 1e-9);
        }

        #[test]
        fn pose_composition_associates(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.rotation - r.rotation).abs().max() < 1e-9);
            prop_assert!((l.translation - r.translation).abs().max() < 1e-9);
        }

        #[test]
        fn pixel_ray_round_trips(pose in arb_pose(), u in 0.0f64..80.0, v in 0.0f64..60.0, t in 0.1f64..200.0,
                                 f in 20.0f64..200.0) {
            let k = CameraIntrinsics::centered(f, 80, 60).unwrap();
            let ray = pixel_to_ray(&pose, &k, u, v);
            prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
            let (pu, pv) = project_world(&k, &pose, &ray.at(t)).unwrap();
            prop_assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6);
        }
    }
}
