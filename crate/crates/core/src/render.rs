//! Quadrature volume rendering along rays.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::RgbImage;
use crate::error::{Error, Result};
use crate::field::{Appearance, QueryScratch, RadianceField};
use crate::geometry::{pixel_to_ray, CameraIntrinsics, Pose, Ray};
use crate::tape;

/// Guards the expected-depth division on empty rays.
pub const DEPTH_EPSILON: f64 = 1e-6;

/// Sample positions along a ray and the width of the bin each one owns.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Index of the first sample at or beyond `d`, i.e. the quadrature
    /// interval `(t_{i-1}, t_i]` containing `d`; the last sample covers the
    /// tail up to the far bound. `None` when `d` lies outside `[near, far)`.
    pub fn terminal_of(&self, near: f64, d: f64) -> Option<usize> {
        let far = near + self.delta.iter().sum::<f64>();
        if !(d >= near && d < far) {
            return None;
        }
        Some(self.t.iter().position(|&t| t >= d).unwrap_or(self.t.len() - 1))
    }

    /// Index of the bin containing `d`, if any.
    pub fn bin_of(&self, near: f64, d: f64) -> Option<usize> {
        let mut edge = near;
        for (i, &w) in self.delta.iter().enumerate() {
            if d >= edge && d < edge + w {
                return Some(i);
            }
            edge += w;
        }
        None
    }
}

/// Splits `[near, far]` into `n` equal bins and places one sample per bin:
/// at the bin centre, or uniformly inside it when `jitter` is given.
pub fn sample_ray<R: Rng>(ray: &Ray, n: usize, jitter: Option<&mut R>) -> Result<Samples> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    if !(ray.far.is_finite() && ray.near >= 0.0 && ray.near < ray.far) {
        return Err(Error::InvalidArgument(format!("ray bounds [{}, {}]", ray.near, ray.far)));
    }
    let width = (ray.far - ray.near) / n as f64;
    let mut t = Vec::with_capacity(n);
    match jitter {
        Some(rng) => {
            for i in 0..n {
                t.push(ray.near + (i as f64 + rng.gen::<f64>()) * width);
            }
        }
        None => {
            for i in 0..n {
                t.push(ray.near + (i as f64 + 0.5) * width);
            }
        }
    }
    Ok(Samples {
        t,
        delta: vec![width; n],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    /// Weight-averaged sample distance, in meters along the unit ray.
    pub depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
}

/// Alpha-composites samples with densities `sigma` and colours `rgb`.
pub fn composite(samples: &Samples, sigma: &[f64], rgb: &[[f64; 3]]) -> RenderOutput {
    let n = samples.len();
    assert!(sigma.len() == n && rgb.len() == n);
    let mut weights = vec![0.0; n];
    tape::volume_weights(sigma, &samples.delta, &mut weights);
    let mut color = [0.0; 3];
    let mut opacity = 0.0;
    let mut depth_sum = 0.0;
    for i in 0..n {
        let w = weights[i];
        for c in 0..3 {
            color[c] += w * rgb[i][c];
        }
        opacity += w;
        depth_sum += w * samples.t[i];
    }
    RenderOutput {
        color,
        depth: depth_sum / opacity.max(DEPTH_EPSILON),
        opacity,
        weights,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    /// Jitter samples inside their bins, seeded per pixel from `seed`.
    pub stratified: bool,
    pub seed: u64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            n_samples: 96,
            near: 0.1,
            far: 80.0,
            stratified: false,
            seed: 0,
        }
    }
}

/// Renders one ray; the ray's own bounds are replaced by `settings`.
pub fn render_ray(
    field: &RadianceField,
    ray: &Ray,
    appearance: Appearance,
    settings: &RenderSettings,
    pixel_seed: u64,
    scratch: &mut QueryScratch,
) -> Result<RenderOutput> {
    let ray = ray.with_bounds(settings.near, settings.far);
    let samples = if settings.stratified {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(pixel_seed);
        sample_ray(&ray, settings.n_samples, Some(&mut rng))?
    } else {
        sample_ray::<ChaCha8Rng>(&ray, settings.n_samples, None)?
    };
    let ctx = field.ray_context(&ray.direction, appearance)?;
    let mut sigma = Vec::with_capacity(samples.len());
    let mut rgb = Vec::with_capacity(samples.len());
    for &t in &samples.t {
        let (s, c) = field.query_with(&ray.at(t), &ctx, scratch);
        sigma.push(s);
        rgb.push(c);
    }
    Ok(composite(&samples, &sigma, &rgb))
}

pub fn render_pixel(
    field: &RadianceField,
    ray: &Ray,
    appearance: Appearance,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    render_ray(field, ray, appearance, settings, 0, &mut QueryScratch::default())
}

/// Colour and depth images for a camera at `camera_pose`.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub image: RgbImage,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

pub fn render_view(
    field: &RadianceField,
    camera_pose: &Pose,
    k: &CameraIntrinsics,
    appearance: Appearance,
    settings: &RenderSettings,
) -> Result<RenderedView> {
    let n = k.pixel_count();
    let mut data = Vec::with_capacity(3 * n);
    let mut depth = Vec::with_capacity(n);
    let mut opacity = Vec::with_capacity(n);
    let mut scratch = QueryScratch::default();
    for v in 0..k.height {
        for u in 0..k.width {
            let ray = pixel_to_ray(camera_pose, k, u as f64, v as f64);
            let index = v as u64 * k.width as u64 + u as u64;
            let out = render_ray(field, &ray, appearance, settings, index, &mut scratch)?;
            data.extend(out.color.iter().map(|c| c.clamp(0.0, 1.0)));
            depth.push(out.depth);
            opacity.push(out.opacity);
        }
    }
    Ok(RenderedView {
        image: RgbImage::new(k.width, k.height, data)?,
        depth,
        opacity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn ray(near: f64, far: f64) -> Ray {
        Ray::new(Vec3::zeros(), Vec3::x(), near, far).unwrap()
    }

    #[test]
    fn two_bins_use_centres() {
        let s = sample_ray::<ChaCha8Rng>(&ray(1.0, 3.0), 2, None).unwrap();
        assert_eq!(s.t, vec![1.5, 2.5]);
        assert_eq!(s.delta, vec![1.0, 1.0]);
        assert!(sample_ray::<ChaCha8Rng>(&ray(1.0, 3.0), 1, None).is_err());
    }

    #[test]
    fn jittered_samples_are_ordered_and_reproducible() {
        let r = ray(0.5, 10.0);
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let sa = sample_ray(&r, 17, Some(&mut a)).unwrap();
        let sb = sample_ray(&r, 17, Some(&mut b)).unwrap();
        assert_eq!(sa, sb);
        assert!(sa.t.windows(2).all(|w| w[0] < w[1]));
        assert!(sa.t[0] >= 0.5 && *sa.t.last().unwrap() <= 10.0);
        let total: f64 = sa.delta.iter().sum();
        assert!((total - 9.5).abs() < 1e-12);
    }

    #[test]
    fn empty_space_is_transparent() {
        let s = sample_ray::<ChaCha8Rng>(&ray(0.0, 4.0), 8, None).unwrap();
        let out = composite(&s, &[0.0; 8], &[[0.7; 3]; 8]);
        assert_eq!(out.color, [0.0; 3]);
        assert_eq!(out.opacity, 0.0);
    }

    #[test]
    fn opaque_first_sample_dominates() {
        let s = sample_ray::<ChaCha8Rng>(&ray(0.0, 4.0), 4, None).unwrap();
        let mut rgb = [[0.0; 3]; 4];
        rgb[0] = [0.2, 0.4, 0.6];
        let out = composite(&s, &[1e4, 1.0, 1.0, 1.0], &rgb);
        for c in 0..3 {
            assert!((out.color[c] - rgb[0][c]).abs() < 1e-12);
        }
        assert!((out.depth - s.t[0]).abs() < 1e-9);
    }

    #[test]
    fn splitting_a_sample_changes_nothing() {
        let whole = Samples {
            t: vec![1.0, 2.0, 3.0],
            delta: vec![1.0, 1.0, 1.0],
        };
        let split = Samples {
            t: vec![1.0, 1.75, 2.25, 3.0],
            delta: vec![1.0, 0.5, 0.5, 1.0],
        };
        let c = [[0.1, 0.2, 0.3], [0.9, 0.5, 0.1], [0.4, 0.4, 0.4]];
        let a = composite(&whole, &[0.3, 1.2, 0.7], &c);
        let b = composite(&split, &[0.3, 1.2, 1.2, 0.7], &[c[0], c[1], c[1], c[2]]);
        for k in 0..3 {
            assert!((a.color[k] - b.color[k]).abs() < 1e-9);
        }
        assert!((a.opacity - b.opacity).abs() < 1e-9);
    }

    #[test]
    fn bin_lookup() {
        let s = sample_ray::<ChaCha8Rng>(&ray(2.0, 6.0), 4, None).unwrap();
        assert_eq!(s.bin_of(2.0, 2.0), Some(0));
        assert_eq!(s.bin_of(2.0, 4.5), Some(2));
        assert_eq!(s.bin_of(2.0, 6.0), None);
        assert_eq!(s.bin_of(2.0, 1.0), None);
    }
}
