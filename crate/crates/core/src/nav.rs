//! Guidance markers: trajectory to ground polygons, and depth-tested
//! compositing of the markers into rendered views.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::RgbImage;
use crate::error::{Error, Result};
use crate::field::{Appearance, QueryScratch, RadianceField};
use crate::geometry::{pixel_to_ray, CameraIntrinsics, Pose, Ray};
use crate::render::{render_ray, RenderOutput, RenderSettings};
use crate::synth::Scene;

pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_WIDTH: f64 = 1.0;
pub const DEFAULT_COLOR: [f64; 3] = [1.0, 1.0, 0.0];
/// Height of the marker plane above the road, so that a marker lying on a
/// correctly rendered road still passes the strict depth test.
pub const DEFAULT_LIFT: f64 = 0.1;
/// Joins whose miter is longer than this many widths are bevelled.
pub const MITER_LIMIT: f64 = 4.0;

/// A recorded drive: rows of `(timestamp, x, y)` on the ground plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTrajectory {
    pub trip: u32,
    pub points: Vec<(f64, f64, f64)>,
}

impl GuidanceTrajectory {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs at least 2 points, got {}",
                self.points.len()
            )));
        }
        for (i, w) in self.points.windows(2).enumerate() {
            if w[0].1 == w[1].1 && w[0].2 == w[1].2 {
                return Err(Error::DegenerateSegment(i));
            }
        }
        Ok(())
    }

    /// Reads `t x y` rows; blank lines and `#` comments are skipped.
    pub fn read(reader: impl BufRead, trip: u32) -> Result<Self> {
        let mut points = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(format!("trajectory line {}", n + 1), e))?;
            if vals.len() != 3 || vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(format!("trajectory line {}", n + 1), "expected `t x y`"));
            }
            points.push((vals[0], vals[1], vals[2]));
        }
        Ok(Self { trip, points })
    }

    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        for (t, x, y) in &self.points {
            writeln!(w, "{t} {x} {y}")?;
        }
        Ok(())
    }
}

/// Marker appearance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkerStyle {
    pub width: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    pub lift: f64,
}

impl Default for MarkerStyle {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            color: DEFAULT_COLOR,
            alpha: DEFAULT_ALPHA,
            lift: DEFAULT_LIFT,
        }
    }
}

impl MarkerStyle {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) {
            return Err(Error::InvalidArgument(format!("marker width {} must be positive", self.width)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("marker alpha {} outside (0, 1]", self.alpha)));
        }
        if !self.lift.is_finite() {
            return Err(Error::InvalidArgument("marker lift must be finite".into()));
        }
        Ok(())
    }
}

/// A planar polygon at height `z`, counter-clockwise in xy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerPolygon {
    pub corners: Vec<[f64; 2]>,
    pub z: f64,
    pub color: [f64; 3],
    pub alpha: f64,
}

impl MarkerPolygon {
    /// Even-odd point-in-polygon test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.corners.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (self.corners[i], self.corners[j]);
            if (a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0] {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    /// Ray parameter of the hit with this polygon's plane, if inside.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        let dz = ray.direction.z;
        if dz.abs() < f64::EPSILON {
            return None;
        }
        let t = (self.z - ray.origin.z) / dz;
        if !(t > 0.0) {
            return None;
        }
        let p = ray.origin + ray.direction * t;
        self.contains(p.x, p.y).then_some(t)
    }
}

fn ccw(mut corners: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    let n = corners.len();
    let area: f64 = (0..n)
        .map(|i| {
            let (a, b) = (corners[i], corners[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    if area < 0.0 {
        corners.reverse();
    }
    corners
}

/// One quad per segment, `width` wide and centred on it. Interior joins are
/// mitered, so neighbouring quads share the join edge whose midpoint is the
/// trajectory vertex; joins whose miter exceeds [`MITER_LIMIT`] widths end
/// both quads square at the vertex and add a triangle over the outer gap.
pub fn trajectory_to_markers(traj: &GuidanceTrajectory, style: &MarkerStyle) -> Result<Vec<MarkerPolygon>> {
    style.validate()?;
    traj.validate()?;
    let pts: Vec<[f64; 2]> = traj.points.iter().map(|p| [p.1, p.2]).collect();
    let half = style.width / 2.0;
    let dirs: Vec<[f64; 2]> = pts
        .windows(2)
        .map(|w| {
            let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
            let len = dx.hypot(dy);
            [dx / len, dy / len]
        })
        .collect();
    let normal = |d: [f64; 2]| [-d[1], d[0]];
    let offset = |p: [f64; 2], v: [f64; 2], s: f64| [p[0] + v[0] * s, p[1] + v[1] * s];
    // Per vertex: the (left, right) join points seen by the segment ending
    // there and by the segment starting there.
    let n_seg = dirs.len();
    let mut end_edge = vec![[[0.0; 2]; 2]; n_seg];
    let mut start_edge = vec![[[0.0; 2]; 2]; n_seg];
    let mut bevels = Vec::new();
    let n0 = normal(dirs[0]);
    start_edge[0] = [offset(pts[0], n0, half), offset(pts[0], n0, -half)];
    let nl = normal(dirs[n_seg - 1]);
    end_edge[n_seg - 1] = [offset(pts[n_seg], nl, half), offset(pts[n_seg], nl, -half)];
    for v in 1..n_seg {
        let (na, nb) = (normal(dirs[v - 1]), normal(dirs[v]));
        let m = [na[0] + nb[0], na[1] + nb[1]];
        let m_len = m[0].hypot(m[1]);
        // cos(turn/2) = |na + nb| / 2; the miter spans width / cos(turn/2).
        let cos_half = m_len / 2.0;
        if cos_half > 0.0 && style.width / cos_half <= MITER_LIMIT * style.width {
            let scale = half / cos_half / m_len;
            let mv = [m[0] * scale, m[1] * scale];
            let edge = [offset(pts[v], mv, 1.0), offset(pts[v], mv, -1.0)];
            end_edge[v - 1] = edge;
            start_edge[v] = edge;
        } else {
            end_edge[v - 1] = [offset(pts[v], na, half), offset(pts[v], na, -half)];
            start_edge[v] = [offset(pts[v], nb, half), offset(pts[v], nb, -half)];
            // Outer side: left for a right turn, right for a left turn.
            let cross = dirs[v - 1][0] * dirs[v][1] - dirs[v - 1][1] * dirs[v][0];
            let side = if cross < 0.0 { 0 } else { 1 };
            bevels.push(vec![pts[v], end_edge[v - 1][side], start_edge[v][side]]);
        }
    }
    let mut out: Vec<MarkerPolygon> = (0..n_seg)
        .map(|s| MarkerPolygon {
            corners: ccw(vec![start_edge[s][0], start_edge[s][1], end_edge[s][1], end_edge[s][0]]),
            z: style.lift,
            color: style.color,
            alpha: style.alpha,
        })
        .collect();
    out.extend(bevels.into_iter().map(|c| MarkerPolygon {
        corners: ccw(c),
        z: style.lift,
        color: style.color,
        alpha: style.alpha,
    }));
    Ok(out)
}

/// Nearest marker hit along the ray, with the polygon that produced it.
pub fn ray_marker_hit<'a>(ray: &Ray, markers: &'a [MarkerPolygon]) -> Option<(f64, &'a MarkerPolygon)> {
    markers
        .iter()
        .filter_map(|m| m.intersect(ray).map(|t| (t, m)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Smallest positive hit distance over all markers.
pub fn ray_marker_depth(ray: &Ray, markers: &[MarkerPolygon]) -> Option<f64> {
    ray_marker_hit(ray, markers).map(|(t, _)| t)
}

/// `α C + (1 − α) c_m` when the marker is in front of the scene surface,
/// otherwise the scene colour unchanged.
pub fn compose_navigation_pixel(scene: &RenderOutput, marker_depth: Option<f64>, color: [f64; 3], alpha: f64) -> [f64; 3] {
    match marker_depth {
        Some(d) if d < scene.depth => {
            let c = scene.color;
            [0, 1, 2].map(|k| alpha * c[k] + (1.0 - alpha) * color[k])
        }
        _ => scene.color,
    }
}

/// Anything that can be rendered one pixel ray at a time.
pub trait SceneSource {
    fn render(&self, ray: &Ray, pixel: u64, scratch: &mut QueryScratch) -> Result<RenderOutput>;
}

/// A trained field rendered with fixed appearance and sampling settings.
pub struct FieldSource<'a> {
    pub field: &'a RadianceField,
    pub appearance: Appearance,
    pub settings: RenderSettings,
}

impl SceneSource for FieldSource<'_> {
    fn render(&self, ray: &Ray, pixel: u64, scratch: &mut QueryScratch) -> Result<RenderOutput> {
        render_ray(self.field, ray, self.appearance, &self.settings, pixel, scratch)
    }
}

/// Exact colour and depth of a synthetic scene on one trip.
pub struct OracleSource<'a> {
    pub scene: &'a Scene,
    pub trip: Option<u32>,
}

impl SceneSource for OracleSource<'_> {
    fn render(&self, ray: &Ray, _pixel: u64, _scratch: &mut QueryScratch) -> Result<RenderOutput> {
        let hit = match self.trip {
            Some(t) => self.scene.trace(ray, t),
            None => self.scene.trace_static(ray),
        };
        Ok(RenderOutput {
            color: hit.color,
            depth: hit.depth,
            opacity: 1.0,
            weights: Vec::new(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct NavigationView {
    pub image: RgbImage,
    pub depth: Vec<f64>,
    /// Pixels whose colour was blended with a marker.
    pub tinted: Vec<bool>,
}

/// Renders every pixel and composites the nearest visible marker into it.
pub fn render_navigation_view(
    source: &dyn SceneSource,
    camera_pose: &Pose,
    k: &CameraIntrinsics,
    markers: &[MarkerPolygon],
) -> Result<NavigationView> {
    let n = k.pixel_count();
    let mut data = Vec::with_capacity(3 * n);
    let mut depth = Vec::with_capacity(n);
    let mut tinted = Vec::with_capacity(n);
    let mut scratch = QueryScratch::default();
    for v in 0..k.height {
        for u in 0..k.width {
            let pixel = v as u64 * k.width as u64 + u as u64;
            let ray = pixel_to_ray(camera_pose, k, u as f64, v as f64);
            let out = source.render(&ray, pixel, &mut scratch)?;
            let hit = ray_marker_hit(&ray, markers);
            let c = match hit {
                Some((t, m)) => compose_navigation_pixel(&out, Some(t), m.color, m.alpha),
                None => out.color,
            };
            tinted.push(matches!(hit, Some((t, _)) if t < out.depth));
            data.extend(c.map(|x| x.clamp(0.0, 1.0)));
            depth.push(out.depth);
        }
    }
    Ok(NavigationView {
        image: RgbImage::new(k.width, k.height, data)?,
        depth,
        tinted,
    })
}
