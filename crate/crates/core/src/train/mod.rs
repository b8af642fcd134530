//! Optimisation of a [`RadianceField`] against posed images and ground
//! depth priors.

pub mod adam;
pub mod loss;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AppearanceKey, ImageRecord, RgbImage};
use crate::error::{Error, Result};
use crate::field::{Appearance, RadianceField};
use crate::geometry::{pixel_to_ray, CameraIntrinsics, Pose};
use crate::ground::{build_ground_depth_map, complete_record_occlusions};
use crate::metrics;
use crate::render::{render_view, sample_ray, RenderSettings};
use crate::tape::Tape;

pub use adam::Adam;
pub use loss::{batch_loss, depth_target, loss_depth, loss_rgb, BatchLoss, DepthTarget, LossWeights, RayTarget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Photometric rays per iteration.
    pub batch_rays: usize,
    /// Share of depth-supervised rays in the combined batch.
    pub depth_fraction: f64,
    pub lr_grid: f64,
    pub lr_head: f64,
    pub lr_embedding: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Learning rates decay along a half cosine down to this fraction.
    pub lr_final_factor: f64,
    pub lambda_depth: f64,
    pub depth_target: DepthTarget,
    pub occlusion_fill: bool,
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    pub max_ground_depth: f64,
    pub seed: u64,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_rays: 256,
            depth_fraction: 0.25,
            lr_grid: 1e-2,
            lr_head: 5e-3,
            lr_embedding: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-10,
            lr_final_factor: 0.05,
            lambda_depth: 0.05,
            depth_target: DepthTarget::Dirac,
            occlusion_fill: true,
            n_samples: 48,
            near: 0.3,
            far: 60.0,
            max_ground_depth: 200.0,
            seed: 0,
            eval_every: 0,
            eval_samples: 96,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        if self.batch_rays == 0 || self.n_samples < 2 {
            return bad("batch_rays must be positive and n_samples at least 2".into());
        }
        if !(self.lambda_depth >= 0.0) {
            return bad(format!("lambda_depth {} must be non-negative", self.lambda_depth));
        }
        if !(0.0..1.0).contains(&self.depth_fraction) {
            return bad(format!("depth_fraction {} outside [0, 1)", self.depth_fraction));
        }
        for (name, v) in [("lr_grid", self.lr_grid), ("lr_head", self.lr_head), ("lr_embedding", self.lr_embedding)] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.near >= 0.0 && self.near < self.far && self.far.is_finite()) {
            return bad(format!("bounds [{}, {}]", self.near, self.far));
        }
        Ok(())
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            n_samples: self.eval_samples,
            near: self.near,
            far: self.far,
            stratified: false,
            seed: self.seed,
        }
    }

    fn depth_rays_per_batch(&self) -> usize {
        if self.lambda_depth == 0.0 || self.depth_fraction == 0.0 {
            return 0;
        }
        (self.batch_rays as f64 * self.depth_fraction / (1.0 - self.depth_fraction)).round() as usize
    }
}

struct TrainImage {
    camera_pose: Pose,
    k: CameraIntrinsics,
    key: AppearanceKey,
    pixels: RgbImage,
    /// Pixels not covered by a moving object.
    static_pixels: Vec<u32>,
    /// `(pixel, ground depth)` pairs inside the sampling range.
    depth_pixels: Vec<(u32, f64)>,
}

/// Images prepared for ray sampling.
pub struct TrainingSet {
    images: Vec<TrainImage>,
    with_depth: Vec<usize>,
}

impl TrainingSet {
    pub fn new(images: &[ImageRecord], cfg: &TrainConfig) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut out = Vec::with_capacity(images.len());
        let mut with_depth = Vec::new();
        for (idx, img) in images.iter().enumerate() {
            img.validate()?;
            let n = img.intrinsics().pixel_count();
            let static_pixels = (0..n as u32).filter(|&i| !img.mask.is_dynamic_at(i as usize)).collect();
            let mut map = build_ground_depth_map(img, cfg.max_ground_depth);
            if cfg.occlusion_fill {
                map = complete_record_occlusions(&map, img, cfg.max_ground_depth);
            }
            let depth_pixels: Vec<(u32, f64)> = map
                .valid_pixels()
                .filter(|&(_, d)| d > cfg.near && d < cfg.far)
                .map(|(i, d)| (i as u32, d))
                .collect();
            if !depth_pixels.is_empty() {
                with_depth.push(idx);
            }
            out.push(TrainImage {
                camera_pose: img.camera_pose(),
                k: *img.intrinsics(),
                key: img.sequence(),
                pixels: img.pixels.clone(),
                static_pixels,
                depth_pixels,
            });
        }
        Ok(Self { images: out, with_depth })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Distinct appearance keys, sorted.
    pub fn sequences(&self) -> Vec<AppearanceKey> {
        let mut keys: Vec<_> = self.images.iter().map(|i| i.key).collect();
        keys.sort();
        keys.dedup();
        keys
    }

    pub fn depth_pixel_count(&self) -> usize {
        self.images.iter().map(|i| i.depth_pixels.len()).sum()
    }

    fn ray_target<R: Rng>(
        &self,
        image: usize,
        pixel: u32,
        cfg: &TrainConfig,
        jitter: &mut R,
        with_color: bool,
        depth: Option<f64>,
    ) -> Result<RayTarget> {
        let img = &self.images[image];
        let (u, v) = (pixel % img.k.width, pixel / img.k.width);
        let ray = pixel_to_ray(&img.camera_pose, &img.k, u as f64, v as f64).with_bounds(cfg.near, cfg.far);
        let samples = sample_ray(&ray, cfg.n_samples, Some(jitter))?;
        let depth_target = match depth {
            Some(d) => Some(depth_target(&samples, cfg.near, cfg.far, d, cfg.depth_target)?),
            None => None,
        };
        Ok(RayTarget {
            ray,
            appearance: img.key.into(),
            samples,
            color: with_color.then(|| img.pixels.pixel(pixel as usize)),
            depth_target,
        })
    }
}

/// Independent random streams, so that adding depth rays never perturbs
/// the photometric batches.
struct Streams {
    color: ChaCha8Rng,
    color_jitter: ChaCha8Rng,
    depth: ChaCha8Rng,
    depth_jitter: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            color: stream(1),
            color_jitter: stream(2),
            depth: stream(3),
            depth_jitter: stream(4),
        }
    }
}

fn draw_batch(set: &TrainingSet, cfg: &TrainConfig, rng: &mut Streams, out: &mut Vec<RayTarget>) -> Result<()> {
    out.clear();
    for _ in 0..cfg.batch_rays {
        let i = rng.color.gen_range(0..set.images.len());
        let img = &set.images[i];
        if img.static_pixels.is_empty() {
            continue;
        }
        let p = img.static_pixels[rng.color.gen_range(0..img.static_pixels.len())];
        out.push(set.ray_target(i, p, cfg, &mut rng.color_jitter, true, None)?);
    }
    if !set.with_depth.is_empty() {
        for _ in 0..cfg.depth_rays_per_batch() {
            let i = set.with_depth[rng.depth.gen_range(0..set.with_depth.len())];
            let img = &set.images[i];
            let (p, d) = img.depth_pixels[rng.depth.gen_range(0..img.depth_pixels.len())];
            out.push(set.ray_target(i, p, cfg, &mut rng.depth_jitter, false, Some(d))?);
        }
    }
    Ok(())
}

/// A held-out camera with ground truth.
#[derive(Debug, Clone)]
pub struct EvalView {
    pub camera_pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub appearance: Appearance,
    pub image: RgbImage,
    /// Ground-truth depth per pixel; non-finite entries are skipped.
    pub depth: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub depth_rmse: f64,
    pub depth_rmse_1sigma: f64,
    pub depth_rmse_2sigma: f64,
}

/// Mean PSNR/SSIM over views and depth RMSE pooled over all valid pixels.
pub fn evaluate(field: &RadianceField, views: &[EvalView], settings: &RenderSettings) -> Result<EvalSummary> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("no evaluation views".into()));
    }
    let (mut psnr, mut ssim) = (0.0, 0.0);
    let (mut pred, mut gt, mut valid) = (Vec::new(), Vec::new(), Vec::new());
    for v in views {
        let out = render_view(field, &v.camera_pose, &v.intrinsics, v.appearance, settings)?;
        psnr += metrics::psnr(&out.image, &v.image)?;
        ssim += metrics::ssim(&out.image, &v.image)?;
        valid.extend(v.depth.iter().map(|d| d.is_finite()));
        gt.extend(v.depth.iter().map(|d| if d.is_finite() { *d } else { 0.0 }));
        pred.extend(out.depth);
    }
    let n = views.len() as f64;
    Ok(EvalSummary {
        psnr: psnr / n,
        ssim: ssim / n,
        depth_rmse: metrics::depth_rmse(&pred, &gt, &valid, None)?.rmse,
        depth_rmse_1sigma: metrics::depth_rmse(&pred, &gt, &valid, Some(1.0))?.rmse,
        depth_rmse_2sigma: metrics::depth_rmse(&pred, &gt, &valid, Some(2.0))?.rmse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub psnr: f64,
    pub depth_rmse: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

impl TrainReport {
    /// Rows of `iteration loss psnr depth_rmse`.
    pub fn write_trace(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "iteration\tloss\tpsnr\tdepth_rmse")?;
        for r in &self.trace {
            writeln!(w, "{}\t{:.6}\t{:.4}\t{:.4}", r.iteration, r.loss, r.psnr, r.depth_rmse)?;
        }
        Ok(())
    }

    fn median(v: &[f64]) -> f64 {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    }

    /// Median loss over the first and last tenth of training.
    pub fn loss_trend(&self) -> Option<(f64, f64)> {
        let n = self.losses.len() / 10;
        (n > 0).then(|| (Self::median(&self.losses[..n]), Self::median(&self.losses[self.losses.len() - n..])))
    }
}

/// Builds a field sized for `set` with the sequences it contains.
pub fn new_field(config: crate::field::FieldConfig, set: &TrainingSet) -> Result<RadianceField> {
    RadianceField::new(config, &set.sequences())
}

/// Runs `cfg.iterations` Adam steps. Deterministic for a given seed.
pub fn train(field: &mut RadianceField, set: &TrainingSet, cfg: &TrainConfig, eval: &[EvalView]) -> Result<TrainReport> {
    cfg.validate()?;
    for key in set.sequences() {
        field.embedding(key)?;
    }
    let mut adam = Adam::new(field.layout(), cfg);
    let mut streams = Streams::new(cfg.seed);
    let mut grad = vec![0.0; field.params().len()];
    let mut tape = Tape::new();
    let mut batch = Vec::new();
    let mut report = TrainReport::default();
    let weights = LossWeights {
        lambda_depth: cfg.lambda_depth,
        normalizer: cfg.batch_rays as f64,
    };
    for it in 0..cfg.iterations {
        draw_batch(set, cfg, &mut streams, &mut batch)?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = batch_loss(field, &batch, weights, Some(&mut grad), &mut tape)?;
        if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                loss: loss.total,
            });
        }
        let progress = it as f64 / cfg.iterations.max(1) as f64;
        let scale = cfg.lr_final_factor + (1.0 - cfg.lr_final_factor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        adam.step(field.params_mut(), &grad, scale);
        report.losses.push(loss.total);
        let last = it + 1 == cfg.iterations;
        let due = cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0;
        if !eval.is_empty() && (due || last) {
            let s = evaluate(field, eval, &cfg.render_settings())?;
            log::info!("iter {} loss {:.5} psnr {:.2} depth_rmse {:.3}", it + 1, loss.total, s.psnr, s.depth_rmse);
            report.trace.push(TraceRow {
                iteration: it + 1,
                loss: loss.total,
                psnr: s.psnr,
                depth_rmse: s.depth_rmse,
            });
        }
    }
    Ok(report)
}
