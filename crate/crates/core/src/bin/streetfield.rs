use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use streetfield::config::PipelineConfig;
use streetfield::dataset::ImageRecord;
use streetfield::manifest::{write_dataset, Dataset};
use streetfield::metrics::{write_table, MetricsRow};
use streetfield::nav::GuidanceTrajectory;
use streetfield::pipeline::{self, AppearanceChoice, ModelStore, RenderRequest};
use streetfield::service::{serve, ServiceState};
use streetfield::sfm::{candidate_pairs_by_prior, gate_matches_by_semantics, read_features, read_matches, write_matches, LabelMerge};
use streetfield::synth::{make_trips, Scene, SynthConfig};
use streetfield::train::EvalView;
use streetfield::Error;

#[derive(Parser)]
#[command(name = "streetfield", version, about = "Street-scene radiance fields from vehicle imagery")]
struct Cli {
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic street dataset with exact ground truth.
    Synth(SynthArgs),
    /// Run the image filters and write the per-image report.
    Select {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tile the selected images into overlapping blocks.
    Partition {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Partition every image instead of the selected ones.
        #[arg(long)]
        no_select: bool,
    },
    /// Drop feature matches across semantic classes or on moving objects.
    SfmFilter(SfmArgs),
    /// Write ground-plane depth rasters and validity sidecars.
    Depth {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select, partition and train one model per block.
    Train(TrainArgs),
    /// Render a view described by a JSON request to PNG.
    Render(RenderArgs),
    /// Render a view with a trip's trajectory drawn as ground markers.
    Navigate {
        #[command(flatten)]
        render: RenderArgs,
        #[arg(long)]
        trip: u32,
    },
    /// Score a model against images with ground-plane depth references.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve `/info`, `/render` and `/trajectories` over HTTP.
    Serve {
        #[arg(long)]
        model: PathBuf,
        /// Dataset whose trajectories are offered for markers.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    trips: u32,
    #[arg(long, default_value_t = 12)]
    images_per_trip: u32,
    #[arg(long, default_value_t = 80)]
    width: u32,
    #[arg(long, default_value_t = 60)]
    height: u32,
    #[arg(long, default_value_t = 0.0)]
    tint: f64,
    #[arg(long, default_value_t = 0)]
    movers: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    scene_seed: u64,
}

#[derive(Args)]
struct SfmArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Lines of `imageA imageB idxA idxB score`.
    #[arg(long)]
    matches: PathBuf,
    /// Directory of `<image id>.txt` feature files with `u v label` rows.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also drop pairs whose prior positions are further apart than this.
    #[arg(long)]
    radius: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train only this block.
    #[arg(long)]
    block: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lambda_depth: Option<f64>,
    #[arg(long)]
    no_embeddings: bool,
    #[arg(long)]
    no_occlusion_fill: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "streetfield")]
    model_id: String,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSON render request, the same body `POST /render` accepts.
    #[arg(long, conflicts_with = "image")]
    request: Option<PathBuf>,
    /// Render from the pose and intrinsics of this dataset image.
    #[arg(long, requires = "manifest")]
    image: Option<String>,
    /// Dataset providing `--image` and trajectories.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn load_images(manifest: &Path) -> Result<Vec<ImageRecord>> {
    Ok(Dataset::open(manifest)?.load_images()?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_trips: args.trips,
        images_per_trip: args.images_per_trip,
        width: args.width,
        height: args.height,
        focal: 0.75 * args.width as f64,
        tint_strength: args.tint,
        movers_per_trip: args.movers,
        seed: args.seed,
        ..Default::default()
    };
    let (_, data) = make_trips(&Scene::street(args.scene_seed), &cfg)?;
    write_dataset(&args.out, &data.images, &data.trajectories)?;
    println!("wrote {} images to {}", data.images.len(), args.out.display());
    Ok(())
}

fn sfm_filter(args: &SfmArgs) -> Result<()> {
    let ds = Dataset::open(&args.manifest)?;
    let table = &ds.manifest.labels;
    let mut features = HashMap::new();
    for e in &ds.manifest.images {
        let path = args.features.join(format!("{}.txt", e.id));
        if path.exists() {
            features.insert(e.id.clone(), read_features(&e.id, BufReader::new(File::open(&path)?))?);
        }
    }
    let matches = read_matches(BufReader::new(File::open(&args.matches)?))?;
    let mut kept = gate_matches_by_semantics(&matches, &features, &LabelMerge::default());
    let is_dynamic = |img: &str, idx: usize| -> Result<bool> { Ok(table.is_dynamic(features[img][idx].label)?) };
    let mut still = Vec::with_capacity(kept.len());
    for m in kept {
        if !is_dynamic(&m.image_a, m.index_a)? && !is_dynamic(&m.image_b, m.index_b)? {
            still.push(m);
        }
    }
    kept = still;
    if let Some(r) = args.radius {
        let pairs = candidate_pairs_by_prior(&ds.load_images()?, r)?;
        kept.retain(|m| {
            pairs
                .iter()
                .any(|(a, b)| (a == &m.image_a && b == &m.image_b) || (a == &m.image_b && b == &m.image_a))
        });
    }
    write_matches(create(&args.out)?, &kept)?;
    println!("kept {} of {} matches", kept.len(), matches.len());
    Ok(())
}

fn depth(manifest: &Path, out: &Path, cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    for img in load_images(manifest)? {
        let map = pipeline::ground_depth(&img, cfg)?;
        map.write_raster(create(&out.join(format!("{}.depth", img.id)))?)?;
        std::fs::write(out.join(format!("{}.valid", img.id)), map.validity_bytes())?;
        println!("{}\t{} valid", img.id, map.valid_count());
    }
    Ok(())
}

fn train_cmd(args: &TrainArgs, mut cfg: PipelineConfig) -> Result<()> {
    if let Some(n) = args.iters {
        cfg.train.iterations = n;
    }
    if let Some(l) = args.lambda_depth {
        cfg.train.lambda_depth = l;
    }
    if args.no_embeddings {
        cfg.field.appearance_embeddings = false;
    }
    if args.no_occlusion_fill {
        cfg.train.occlusion_fill = false;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
        cfg.field.init_seed = s;
    }
    cfg.validate()?;
    let images = load_images(&args.manifest)?;
    let (selection, kept) = pipeline::select(&images, &cfg)?;
    let blocks = pipeline::partition(&kept, &cfg)?;
    let chosen: Vec<_> = match &args.block {
        Some(id) => vec![blocks
            .iter()
            .find(|b| &b.id == id)
            .ok_or_else(|| Error::NotFound(format!("block {id}")))?],
        None => blocks.iter().collect(),
    };
    std::fs::create_dir_all(&args.out)?;
    selection.write_text(create(&args.out.join(pipeline::SELECTION_FILE))?)?;
    pipeline::write_blocks(&args.out.join(pipeline::BLOCKS_FILE), &blocks)?;
    for block in chosen {
        let tb = pipeline::train_block(&kept, block, &cfg, &args.model_id)?;
        pipeline::write_trained_block(&args.out, &tb)?;
        println!(
            "block {}: {} images, final loss {:.5}",
            block.id,
            block.members.len(),
            tb.report.losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn trajectories(manifest: Option<&Path>) -> Result<Vec<GuidanceTrajectory>> {
    match manifest {
        Some(m) => Ok(Dataset::open(m)?.load_trajectories()?),
        None => Ok(Vec::new()),
    }
}

fn render_cmd(args: &RenderArgs, cfg: &PipelineConfig, trip: Option<u32>) -> Result<()> {
    let store = ModelStore::open(&args.model)?;
    let mut req: RenderRequest = match (&args.request, &args.image) {
        (Some(path), _) => serde_json::from_reader(BufReader::new(File::open(path)?))?,
        (None, Some(id)) => {
            let images = load_images(args.manifest.as_deref().expect("clap requires manifest"))?;
            let img = images
                .iter()
                .find(|i| &i.id == id)
                .ok_or_else(|| Error::NotFound(format!("image {id}")))?;
            let k = *img.intrinsics();
            RenderRequest {
                pose: img.camera_pose(),
                intrinsics: Some(k),
                appearance_key: AppearanceChoice::Key {
                    trip: img.trip,
                    camera: img.camera.id,
                },
                camera: img.camera.id,
                width: k.width,
                height: k.height,
                markers_on: false,
                trajectory_id: None,
                block: None,
            }
        }
        (None, None) => bail!("either --request or --image is required"),
    };
    if let Some(t) = trip {
        req.markers_on = true;
        req.trajectory_id = Some(t);
    }
    let result = pipeline::render_request(&store, &req, cfg, &trajectories(args.manifest.as_deref())?)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&args.out, &result.png)?;
    println!("block {} model {} -> {}", result.block_id, result.model_id, args.out.display());
    Ok(())
}

fn eval_cmd(model: &Path, manifest: &Path, out: Option<&Path>, cfg: &PipelineConfig) -> Result<()> {
    let store = ModelStore::open(model)?;
    let images = load_images(manifest)?;
    let mut views = Vec::with_capacity(images.len());
    for img in &images {
        let map = pipeline::ground_depth(img, cfg)?;
        let depth = (0..img.intrinsics().pixel_count())
            .map(|i| map.get(i).filter(|&d| d < cfg.train.far).unwrap_or(f64::NAN))
            .collect();
        views.push(EvalView {
            camera_pose: img.camera_pose(),
            intrinsics: *img.intrinsics(),
            appearance: img.sequence().into(),
            image: img.pixels.clone(),
            depth,
        });
    }
    let summaries = pipeline::evaluate_views(&store, &views, cfg)?;
    let rows: Vec<MetricsRow> = summaries
        .iter()
        .map(|(id, s)| MetricsRow {
            name: id.clone(),
            psnr: s.psnr,
            ssim: s.ssim,
            rmse_1sigma: s.depth_rmse_1sigma,
            rmse_2sigma: s.depth_rmse_2sigma,
            rmse: s.depth_rmse,
        })
        .collect();
    write_table(output(out)?, &rows)?;
    Ok(())
}

fn serve_cmd(model: &Path, manifest: Option<&Path>, bind: Option<String>, mut cfg: PipelineConfig) -> Result<()> {
    if let Some(b) = bind {
        cfg.service.bind = b;
    }
    let store = ModelStore::open(model)?;
    let bind = cfg.service.bind.clone();
    let state = Arc::new(ServiceState {
        store,
        config: cfg,
        trajectories: trajectories(manifest)?,
    });
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(serve(state, &bind))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = PipelineConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(args) => synth(&args),
        Command::Select { manifest, out } => {
            let (report, kept) = pipeline::select(&load_images(&manifest)?, &cfg)?;
            report.write_text(output(out.as_deref())?)?;
            eprintln!("kept {} images", kept.len());
            Ok(())
        }
        Command::Partition {
            manifest,
            out,
            no_select,
        } => {
            let mut images = load_images(&manifest)?;
            if !no_select {
                images = pipeline::select(&images, &cfg)?.1;
            }
            let blocks = pipeline::partition(&images, &cfg)?;
            pipeline::write_blocks(&out, &blocks)?;
            println!("{} blocks", blocks.len());
            Ok(())
        }
        Command::SfmFilter(args) => sfm_filter(&args),
        Command::Depth { manifest, out } => depth(&manifest, &out, &cfg),
        Command::Train(args) => train_cmd(&args, cfg),
        Command::Render(args) => render_cmd(&args, &cfg, None),
        Command::Navigate { render, trip } => render_cmd(&render, &cfg, Some(trip)),
        Command::Eval { model, manifest, out } => eval_cmd(&model, &manifest, out.as_deref(), &cfg),
        Command::Serve { model, manifest, bind } => serve_cmd(&model, manifest.as_deref(), bind, cfg),
    }
}
