//! Stage orchestration (select, partition, depth, train, eval), the on-disk
//! model directory and the render request shared by the CLI and the service.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::dataset::{ImageRecord, RgbImage};
use crate::error::{Error, Result};
use crate::field::checkpoint::{self, CheckpointMeta};
use crate::field::{Appearance, RadianceField};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::ground::{build_ground_depth_map, complete_record_occlusions, GroundDepthMap};
use crate::manifest::encode_png;
use crate::nav::{render_navigation_view, trajectory_to_markers, FieldSource, GuidanceTrajectory};
use crate::selection::{partition_blocks, run_selection, Block, FilterReport};
use crate::train::{evaluate, new_field, train, EvalSummary, EvalView, TrainReport, TrainingSet};

pub const BLOCKS_FILE: &str = "blocks.json";
pub const SELECTION_FILE: &str = "selection.txt";

pub fn checkpoint_name(block_id: &str) -> String {
    format!("{block_id}.sfck")
}

pub fn trace_name(block_id: &str) -> String {
    format!("{block_id}.trace.txt")
}

pub fn select(images: &[ImageRecord], cfg: &PipelineConfig) -> Result<(FilterReport, Vec<ImageRecord>)> {
    run_selection(images, &cfg.selection).map_err(|e| e.in_stage("select"))
}

pub fn partition(images: &[ImageRecord], cfg: &PipelineConfig) -> Result<Vec<Block>> {
    partition_blocks(images, cfg.partition.block_side, cfg.partition.overlap).map_err(|e| e.in_stage("partition"))
}

/// Ground depth for one image, with occlusion fill when the config asks for it.
pub fn ground_depth(image: &ImageRecord, cfg: &PipelineConfig) -> Result<GroundDepthMap> {
    image.validate().map_err(|e| e.in_stage("depth"))?;
    let map = build_ground_depth_map(image, cfg.train.max_ground_depth);
    Ok(if cfg.train.occlusion_fill {
        complete_record_occlusions(&map, image, cfg.train.max_ground_depth)
    } else {
        map
    })
}

/// Images listed as members of `block`, in input order.
pub fn block_images(images: &[ImageRecord], block: &Block) -> Vec<ImageRecord> {
    images.iter().filter(|img| block.members.contains(&img.id)).cloned().collect()
}

#[derive(Debug, Clone)]
pub struct TrainedBlock {
    pub block: Block,
    pub field: RadianceField,
    pub meta: CheckpointMeta,
    pub report: TrainReport,
}

pub fn train_block(images: &[ImageRecord], block: &Block, cfg: &PipelineConfig, model_id: &str) -> Result<TrainedBlock> {
    let inner = || -> Result<TrainedBlock> {
        let members = block_images(images, block);
        let set = TrainingSet::new(&members, &cfg.train)?;
        let mut field = new_field(cfg.field.clone(), &set)?;
        let report = train(&mut field, &set, &cfg.train, &[])?;
        Ok(TrainedBlock {
            block: block.clone(),
            field,
            meta: CheckpointMeta {
                model_id: model_id.to_string(),
                block_id: Some(block.id.clone()),
                seed: cfg.train.seed,
                iterations: cfg.train.iterations,
            },
            report,
        })
    };
    inner().map_err(|e| e.in_stage("train"))
}

/// Evaluates each view with the model of the block containing its camera.
pub fn evaluate_views(store: &ModelStore, views: &[EvalView], cfg: &PipelineConfig) -> Result<BTreeMap<String, EvalSummary>> {
    let mut by_block: BTreeMap<String, Vec<EvalView>> = BTreeMap::new();
    for v in views {
        let p = v.camera_pose.position();
        let id = store.locate(p.x, p.y).ok_or_else(|| Error::NotFound("no trained block".into()))?;
        by_block.entry(id.to_string()).or_default().push(v.clone());
    }
    let mut out = BTreeMap::new();
    for (id, vs) in by_block {
        let (field, _) = store.get(&id)?;
        let settings = cfg.train.render_settings();
        out.insert(id, evaluate(field, &vs, &settings).map_err(|e| e.in_stage("eval"))?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub selection: FilterReport,
    pub blocks: Vec<Block>,
    pub models: Vec<TrainedBlock>,
}

/// Selection, partition and one training run per block, in block-id order.
pub fn run(images: &[ImageRecord], cfg: &PipelineConfig, model_id: &str) -> Result<PipelineRun> {
    cfg.validate()?;
    let (selection, kept) = select(images, cfg)?;
    let blocks = partition(&kept, cfg)?;
    let mut models = Vec::with_capacity(blocks.len());
    for block in &blocks {
        models.push(train_block(&kept, block, cfg, model_id)?);
    }
    Ok(PipelineRun {
        selection,
        blocks,
        models,
    })
}

pub fn write_blocks(path: &Path, blocks: &[Block]) -> Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), blocks)?;
    Ok(())
}

pub fn read_blocks(path: &Path) -> Result<Vec<Block>> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

/// Writes a trained block's checkpoint and loss trace into `dir`.
pub fn write_trained_block(dir: &Path, tb: &TrainedBlock) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    checkpoint::save(&dir.join(checkpoint_name(&tb.block.id)), &tb.field, &tb.meta)?;
    tb.report.write_trace(BufWriter::new(File::create(dir.join(trace_name(&tb.block.id)))?))?;
    Ok(())
}

pub fn write_run(dir: &Path, run: &PipelineRun) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    run.selection.write_text(BufWriter::new(File::create(dir.join(SELECTION_FILE))?))?;
    write_blocks(&dir.join(BLOCKS_FILE), &run.blocks)?;
    for tb in &run.models {
        write_trained_block(dir, tb)?;
    }
    Ok(())
}

/// Trained block models keyed by block id.
#[derive(Debug, Clone)]
pub struct ModelStore {
    blocks: Vec<Block>,
    models: BTreeMap<String, (RadianceField, CheckpointMeta)>,
}

impl ModelStore {
    pub fn new(blocks: Vec<Block>, models: BTreeMap<String, (RadianceField, CheckpointMeta)>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::NotFound("no trained block models".into()));
        }
        for id in models.keys() {
            if !blocks.iter().any(|b| &b.id == id) {
                return Err(Error::NotFound(format!("block {id} missing from the block list")));
            }
        }
        Ok(Self { blocks, models })
    }

    /// Loads `blocks.json` and every block checkpoint present in `dir`.
    pub fn open(dir: &Path) -> Result<Self> {
        let blocks = read_blocks(&dir.join(BLOCKS_FILE))?;
        let mut models = BTreeMap::new();
        for b in &blocks {
            let path = dir.join(checkpoint_name(&b.id));
            if path.exists() {
                models.insert(b.id.clone(), checkpoint::load(&path)?);
            }
        }
        Self::new(blocks, models)
    }

    pub fn from_run(run: &PipelineRun) -> Result<Self> {
        let models = run
            .models
            .iter()
            .map(|tb| (tb.block.id.clone(), (tb.field.clone(), tb.meta.clone())))
            .collect();
        Self::new(run.blocks.clone(), models)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn trained_ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn get(&self, block_id: &str) -> Result<&(RadianceField, CheckpointMeta)> {
        self.models
            .get(block_id)
            .ok_or_else(|| Error::NotFound(format!("block {block_id}")))
    }

    /// The trained block whose centre is nearest to `(x, y)`, preferring
    /// blocks that contain the point. Ties go to the smaller id.
    pub fn locate(&self, x: f64, y: f64) -> Option<&str> {
        let dist = |b: &Block| (b.center[0] - x).hypot(b.center[1] - y);
        self.blocks
            .iter()
            .filter(|b| self.models.contains_key(&b.id))
            .min_by(|a, b| {
                (!a.contains(x, y), dist(a), &a.id)
                    .partial_cmp(&(!b.contains(x, y), dist(b), &b.id))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .map(|b| b.id.as_str())
    }
}

/// Either `"average"` or an explicit `{trip, camera}` sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AppearanceChoice {
    Key { trip: u32, camera: u32 },
    Named(String),
}

impl Default for AppearanceChoice {
    fn default() -> Self {
        AppearanceChoice::Named("average".into())
    }
}

impl AppearanceChoice {
    pub fn resolve(&self, camera: u32) -> Result<Appearance> {
        match self {
            AppearanceChoice::Key { trip, camera } => Ok(Appearance::Sequence {
                trip: *trip,
                camera: *camera,
            }),
            AppearanceChoice::Named(s) if s == "average" => Ok(Appearance::CameraAverage { camera }),
            AppearanceChoice::Named(s) => Err(Error::InvalidArgument(format!("appearance `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    /// Camera-to-world pose, camera axes right/down/forward.
    pub pose: Pose,
    #[serde(default)]
    pub intrinsics: Option<CameraIntrinsics>,
    #[serde(default)]
    pub appearance_key: AppearanceChoice,
    /// Camera whose average embedding `"average"` refers to.
    #[serde(default)]
    pub camera: u32,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub markers_on: bool,
    /// Trip whose trajectory is drawn; all trajectories when absent.
    #[serde(default)]
    pub trajectory_id: Option<u32>,
    /// Block to render from; located from the pose when absent.
    #[serde(default)]
    pub block: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RenderResult {
    pub image: RgbImage,
    pub png: Vec<u8>,
    pub model_id: String,
    pub block_id: String,
    pub seed: u64,
}

pub fn request_intrinsics(req: &RenderRequest, cfg: &PipelineConfig) -> Result<CameraIntrinsics> {
    match req.intrinsics {
        Some(k) if k.width == req.width && k.height == req.height => Ok(k),
        Some(k) => k.scaled_to(req.width, req.height),
        None => {
            let half = (cfg.service.default_fov_deg.to_radians() / 2.0).tan();
            CameraIntrinsics::centered(req.width as f64 / 2.0 / half, req.width, req.height)
        }
    }
}

/// Renders a request to PNG. Identical inputs give identical bytes.
pub fn render_request(
    store: &ModelStore,
    req: &RenderRequest,
    cfg: &PipelineConfig,
    trajectories: &[GuidanceTrajectory],
) -> Result<RenderResult> {
    if req.width == 0 || req.height == 0 || req.width as u64 * req.height as u64 > cfg.service.max_pixels {
        return Err(Error::InvalidArgument(format!(
            "image size {}x{} outside 1..={} pixels",
            req.width, req.height, cfg.service.max_pixels
        )));
    }
    let k = request_intrinsics(req, cfg)?;
    let block_id = match &req.block {
        Some(id) => id.clone(),
        None => {
            let p = req.pose.position();
            store
                .locate(p.x, p.y)
                .ok_or_else(|| Error::NotFound("no trained block".into()))?
                .to_string()
        }
    };
    let (field, meta) = store.get(&block_id)?;
    let mut markers = Vec::new();
    if req.markers_on {
        let chosen: Vec<&GuidanceTrajectory> = match req.trajectory_id {
            Some(id) => vec![trajectories
                .iter()
                .find(|t| t.trip == id)
                .ok_or_else(|| Error::NotFound(format!("trajectory {id}")))?],
            None => trajectories.iter().collect(),
        };
        for t in chosen {
            markers.extend(trajectory_to_markers(t, &cfg.marker)?);
        }
    }
    let source = FieldSource {
        field,
        appearance: req.appearance_key.resolve(req.camera)?,
        settings: cfg.render,
    };
    let view = render_navigation_view(&source, &req.pose, &k, &markers)?;
    let png = encode_png(&view.image)?;
    Ok(RenderResult {
        image: view.image,
        png,
        model_id: meta.model_id.clone(),
        block_id,
        seed: cfg.render.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use crate::synth::{make_trips, Scene, SynthConfig};
    use crate::train::TrainConfig;

    fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            field: FieldConfig {
                grid_resolutions: vec![4, 8],
                hidden_width: 8,
                ..Default::default()
            },
            train: TrainConfig {
                iterations: 3,
                batch_rays: 16,
                n_samples: 8,
                eval_samples: 8,
                ..Default::default()
            },
            render: crate::render::RenderSettings {
                n_samples: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_data() -> Vec<ImageRecord> {
        let cfg = SynthConfig {
            n_trips: 2,
            images_per_trip: 4,
            width: 16,
            height: 12,
            focal: 12.0,
            ..Default::default()
        };
        make_trips(&Scene::street(0), &cfg).unwrap().1.images
    }

    #[test]
    fn run_writes_and_reloads() {
        let cfg = tiny_config();
        let images = tiny_data();
        let run = run(&images, &cfg, "m").unwrap();
        assert_eq!(run.models.len(), run.blocks.len());
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &run).unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        assert_eq!(store.trained_ids().count(), run.blocks.len());
        let req = RenderRequest {
            pose: images[0].camera_pose(),
            intrinsics: None,
            appearance_key: AppearanceChoice::default(),
            camera: 0,
            width: 8,
            height: 6,
            markers_on: false,
            trajectory_id: None,
            block: None,
        };
        let a = render_request(&store, &req, &cfg, &[]).unwrap();
        let b = render_request(&store, &req, &cfg, &[]).unwrap();
        assert_eq!(a.png, b.png);
        assert_eq!(a.model_id, "m");
    }

    #[test]
    fn unknown_block_is_not_found() {
        let cfg = tiny_config();
        let run = run(&tiny_data(), &cfg, "m").unwrap();
        let store = ModelStore::from_run(&run).unwrap();
        assert!(matches!(store.get("nope"), Err(Error::NotFound(_))));
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let err = run(&[], &tiny_config(), "m").unwrap_err();
        assert!(err.to_string().contains("select") || err.to_string().contains("partition"), "{err}");
    }

    #[test]
    fn appearance_choice_parses() {
        let a: AppearanceChoice = serde_json::from_str("\"average\"").unwrap();
        assert_eq!(a.resolve(2).unwrap(), Appearance::CameraAverage { camera: 2 });
        let k: AppearanceChoice = serde_json::from_str("{\"trip\":1,\"camera\":0}").unwrap();
        assert_eq!(k.resolve(2).unwrap(), Appearance::Sequence { trip: 1, camera: 0 });
        let bad: AppearanceChoice = serde_json::from_str("\"sunset\"").unwrap();
        assert!(bad.resolve(0).is_err());
    }
}
