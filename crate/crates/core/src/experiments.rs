//! Paired training runs on synthetic streets: depth supervision, appearance
//! embeddings, occlusion completion and trip-count scaling.

use crate::dataset::ImageRecord;
use crate::error::Result;
use crate::field::{Appearance, FieldConfig, RadianceField};
use crate::metrics;
use crate::render::render_view;
use crate::semantics::SemanticClass;
use crate::synth::{make_trips, render_oracle, Scene, SceneBox, SynthConfig};
use crate::train::{evaluate, new_field, train, EvalSummary, EvalView, TrainConfig, TrainReport, TrainingSet};

/// Field sized for the bounded synthetic street: the grid spans the street
/// between its end walls, so contraction is off.
pub fn desk_field_config() -> FieldConfig {
    FieldConfig {
        grid_resolutions: vec![8, 16, 32, 64],
        hidden_width: 16,
        scene_center: [0.0, 0.0, 4.0],
        scene_half_extent: [36.0, 12.0, 4.5],
        contraction: false,
        density_bias: -1.0,
        ..Default::default()
    }
}

pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        iterations: 2000,
        far: 55.0,
        ..Default::default()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub field: FieldConfig,
    pub train: TrainConfig,
    pub scene_seed: u64,
    /// Frame `i` of each trip is held out when `i % holdout_every == holdout_offset`.
    pub holdout_every: u32,
    pub holdout_offset: u32,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig {
                n_trips: 3,
                ..Default::default()
            },
            field: desk_field_config(),
            train: desk_train_config(),
            scene_seed: 0,
            holdout_every: 4,
            holdout_offset: 2,
        }
    }
}

fn frame_of(img: &ImageRecord) -> u32 {
    img.id.rsplit('f').next().and_then(|s| s.parse().ok()).unwrap_or(0)
}

/// Splits images into (train, test) by frame index.
pub fn split_holdout(images: &[ImageRecord], every: u32, offset: u32) -> (Vec<ImageRecord>, Vec<ImageRecord>) {
    images.iter().cloned().partition(|img| every == 0 || frame_of(img) % every != offset)
}

/// Evaluation views with oracle depth up to `far`; beyond it (and sky) is skipped.
pub fn eval_views(scene: &Scene, images: &[ImageRecord], far: f64) -> Vec<EvalView> {
    images
        .iter()
        .map(|img| {
            let (_, depth, _) = render_oracle(scene, &img.camera_pose(), img.intrinsics(), Some(img.trip));
            EvalView {
                camera_pose: img.camera_pose(),
                intrinsics: *img.intrinsics(),
                appearance: Appearance::from(img.sequence()),
                image: img.pixels.clone(),
                depth: depth.iter().map(|&d| if d < far { d } else { f64::NAN }).collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub field: RadianceField,
    pub report: TrainReport,
    pub summary: EvalSummary,
}

/// Trains a fresh field on `images` and evaluates it on `views`.
pub fn run(field_cfg: &FieldConfig, train_cfg: &TrainConfig, images: &[ImageRecord], views: &[EvalView]) -> Result<RunResult> {
    let set = TrainingSet::new(images, train_cfg)?;
    let mut field = new_field(field_cfg.clone(), &set)?;
    let report = train(&mut field, &set, train_cfg, &[])?;
    let summary = evaluate(&field, views, &train_cfg.render_settings())?;
    Ok(RunResult { field, report, summary })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Paired {
    pub without: EvalSummary,
    pub with: EvalSummary,
}

/// Same data and seed, `λ_d = 0` against `cfg.train.lambda_depth`.
pub fn depth_ablation(cfg: &ExperimentConfig) -> Result<Paired> {
    let (scene, data) = make_trips(&Scene::street(cfg.scene_seed), &cfg.synth)?;
    let (train_imgs, test_imgs) = split_holdout(&data.images, cfg.holdout_every, cfg.holdout_offset);
    let views = eval_views(&scene, &test_imgs, cfg.train.far);
    let off = TrainConfig {
        lambda_depth: 0.0,
        ..cfg.train.clone()
    };
    let without = run(&cfg.field, &off, &train_imgs, &views)?.summary;
    let with = run(&cfg.field, &cfg.train, &train_imgs, &views)?.summary;
    Ok(Paired { without, with })
}

/// Same data and seed with appearance embeddings disabled and enabled.
/// `cfg.synth.tint_strength` should be non-zero.
pub fn embedding_ablation(cfg: &ExperimentConfig) -> Result<Paired> {
    let (scene, data) = make_trips(&Scene::street(cfg.scene_seed), &cfg.synth)?;
    let (train_imgs, test_imgs) = split_holdout(&data.images, cfg.holdout_every, cfg.holdout_offset);
    let views = eval_views(&scene, &test_imgs, cfg.train.far);
    let off = FieldConfig {
        appearance_embeddings: false,
        ..cfg.field.clone()
    };
    let on = FieldConfig {
        appearance_embeddings: true,
        ..cfg.field.clone()
    };
    let without = run(&off, &cfg.train, &train_imgs, &views)?.summary;
    let with = run(&on, &cfg.train, &train_imgs, &views)?.summary;
    Ok(Paired { without, with })
}

/// A wide vehicle blocking the road ahead of every trip.
pub fn parked_vehicle() -> SceneBox {
    SceneBox::new([16.0, -4.0, 0.0], [28.0, 4.0, 2.5], [0.75, 0.1, 0.1], SemanticClass::Vehicle)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionResult {
    pub rmse_without: f64,
    pub rmse_with: f64,
    /// Masked ground pixels pooled over the test views.
    pub pixels: usize,
}

/// Depth RMSE on test pixels where the parked vehicle hides the road,
/// measured against the road behind it, without and with occlusion fill.
pub fn occlusion_ablation(cfg: &ExperimentConfig) -> Result<OcclusionResult> {
    let base = Scene::street(cfg.scene_seed).with_box(parked_vehicle());
    let (scene, data) = make_trips(&base, &cfg.synth)?;
    let (train_imgs, test_imgs) = split_holdout(&data.images, cfg.holdout_every, cfg.holdout_offset);
    let views = eval_views(&scene, &test_imgs, cfg.train.far);
    let mut gt = Vec::new();
    let mut valid = Vec::new();
    for img in &test_imgs {
        let pose = img.camera_pose();
        let (_, _, seen) = render_oracle(&scene, &pose, img.intrinsics(), Some(img.trip));
        let (_, depth, behind) = render_oracle(&scene, &pose, img.intrinsics(), None);
        for i in 0..depth.len() {
            let masked = seen[i].is_dynamic_by_default() && behind[i].is_ground() && depth[i] < cfg.train.far;
            valid.push(masked);
            gt.push(if masked { depth[i] } else { 0.0 });
        }
    }
    let masked_rmse = |field: &RadianceField, tcfg: &TrainConfig| -> Result<f64> {
        let mut pred = Vec::with_capacity(gt.len());
        for img in &test_imgs {
            let out = render_view(field, &img.camera_pose(), img.intrinsics(), img.sequence().into(), &tcfg.render_settings())?;
            pred.extend(out.depth);
        }
        Ok(metrics::depth_rmse(&pred, &gt, &valid, None)?.rmse)
    };
    let off = TrainConfig {
        occlusion_fill: false,
        ..cfg.train.clone()
    };
    let on = TrainConfig {
        occlusion_fill: true,
        ..cfg.train.clone()
    };
    let without = run(&cfg.field, &off, &train_imgs, &views)?;
    let with = run(&cfg.field, &on, &train_imgs, &views)?;
    Ok(OcclusionResult {
        rmse_without: masked_rmse(&without.field, &off)?,
        rmse_with: masked_rmse(&with.field, &on)?,
        pixels: valid.iter().filter(|&&v| v).count(),
    })
}

/// Test PSNR after training on the first `n` trips, for each `n` in
/// `trip_counts`. The test views are held-out frames of `test_trips`
/// further drives that no run trains on, rendered with each camera's
/// average embedding.
pub fn trips_scaling(cfg: &ExperimentConfig, trip_counts: &[u32], test_trips: u32) -> Result<Vec<(u32, EvalSummary)>> {
    let max = trip_counts.iter().copied().max().unwrap_or(0);
    let synth = SynthConfig {
        n_trips: max + test_trips,
        ..cfg.synth.clone()
    };
    let (scene, data) = make_trips(&Scene::street(cfg.scene_seed), &synth)?;
    let (train_all, test_all) = split_holdout(&data.images, cfg.holdout_every, cfg.holdout_offset);
    let test: Vec<_> = test_all.into_iter().filter(|img| img.trip >= max).collect();
    let mut views = eval_views(&scene, &test, cfg.train.far);
    for (v, img) in views.iter_mut().zip(&test) {
        v.appearance = Appearance::CameraAverage { camera: img.camera.id };
    }
    let mut out = Vec::with_capacity(trip_counts.len());
    for &n in trip_counts {
        let imgs: Vec<_> = train_all.iter().filter(|img| img.trip < n).cloned().collect();
        out.push((n, run(&cfg.field, &cfg.train, &imgs, &views)?.summary));
    }
    Ok(out)
}
