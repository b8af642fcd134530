use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

use streetfield::config::PipelineConfig;
use streetfield::manifest::Dataset;
use streetfield::pipeline::{AppearanceChoice, ModelStore, RenderRequest};
use streetfield::service::{router, ServiceState};

const CONFIG: &str = r#"
[field]
grid_resolutions = [4, 8]
hidden_width = 8

[train]
iterations = 6
batch_rays = 32
n_samples = 8
eval_samples = 8

[render]
n_samples = 8

[partition]
block_side = 6.0
overlap = 0.25
"#;

fn cli(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_streetfield")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    config: std::path::PathBuf,
    manifest: std::path::PathBuf,
    model: std::path::PathBuf,
    root: std::path::PathBuf,
}

fn trained() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("cfg.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let data = root.join("data");
    cli(&["synth", "--out", p(&data), "--trips", "2", "--images-per-trip", "4", "--width", "16", "--height", "12"]);
    let manifest = data.join("manifest.json");
    let model = root.join("model");
    cli(&["--config", p(&config), "train", "--manifest", p(&manifest), "--out", p(&model)]);
    Fixture {
        _dir: dir,
        config,
        manifest,
        model,
        root,
    }
}

fn request(manifest: &Path) -> RenderRequest {
    let img = &Dataset::open(manifest).unwrap().load_images().unwrap()[1];
    RenderRequest {
        pose: img.camera_pose(),
        intrinsics: None,
        appearance_key: AppearanceChoice::Key { trip: 0, camera: 0 },
        camera: 0,
        width: 12,
        height: 9,
        markers_on: true,
        trajectory_id: Some(0),
        block: None,
    }
}

fn state(f: &Fixture) -> Arc<ServiceState> {
    Arc::new(ServiceState {
        store: ModelStore::open(&f.model).unwrap(),
        config: PipelineConfig::load(&f.config).unwrap(),
        trajectories: Dataset::open(&f.manifest).unwrap().load_trajectories().unwrap(),
    })
}

async fn post(state: Arc<ServiceState>, body: String) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = router(state)
        .oneshot(
            Request::post("/render")
                .header("content-type", "application/json")
                .body(Body::from(body))
                .unwrap(),
        )
        .await
        .unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, bytes)
}

#[tokio::test]
async fn cli_and_service_render_identical_bytes() {
    let f = trained();
    let req = request(&f.manifest);
    let req_path = f.root.join("req.json");
    std::fs::write(&req_path, serde_json::to_string(&req).unwrap()).unwrap();
    let png = f.root.join("view.png");
    cli(&[
        "--config",
        p(&f.config),
        "render",
        "--model",
        p(&f.model),
        "--request",
        p(&req_path),
        "--manifest",
        p(&f.manifest),
        "--out",
        p(&png),
    ]);
    let from_cli = std::fs::read(&png).unwrap();
    let (status, headers, from_service) = post(state(&f), serde_json::to_string(&req).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["content-type"], "image/png");
    assert!(headers.contains_key("x-render-ms"));
    assert_eq!(headers["x-model-id"], "streetfield");
    assert!(headers.contains_key("x-block-id"));
    assert_eq!(headers["x-seed"], "0");
    assert_eq!(from_cli, from_service);
    let decoded = image::load_from_memory(&from_service).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (12, 9));
}

#[tokio::test]
async fn service_reports_errors_and_metadata() {
    let f = trained();
    let st = state(&f);
    let mut req = request(&f.manifest);
    req.block = Some("no-such-block".into());
    let (status, _, body) = post(st.clone(), serde_json::to_string(&req).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(String::from_utf8(body).unwrap().contains("no-such-block"));

    let mut req = request(&f.manifest);
    req.width = 0;
    let (status, _, _) = post(st.clone(), serde_json::to_string(&req).unwrap()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let info = router(st.clone())
        .oneshot(Request::get("/info").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(info.status(), StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&info.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert!(!v["blocks"].as_array().unwrap().is_empty());
    assert!(v["blocks"][0]["min"].is_array());
    assert_eq!(v["config"]["train"]["iterations"], 6);

    let traj = router(st)
        .oneshot(Request::get("/trajectories").body(Body::empty()).unwrap())
        .await
        .unwrap();
    let v: serde_json::Value = serde_json::from_slice(&traj.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
}

#[test]
fn training_twice_writes_identical_checkpoints() {
    let f = trained();
    let again = f.root.join("again");
    cli(&["--config", p(&f.config), "train", "--manifest", p(&f.manifest), "--out", p(&again)]);
    let mut names: Vec<_> = std::fs::read_dir(&f.model)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n.to_string_lossy().ends_with(".sfck"))
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        assert_eq!(std::fs::read(f.model.join(&n)).unwrap(), std::fs::read(again.join(&n)).unwrap());
    }
}

#[test]
fn pipeline_subcommands_run() {
    let f = trained();
    let out = cli(&["--config", p(&f.config), "select", "--manifest", p(&f.manifest)]);
    assert_eq!(out.lines().filter(|l| !l.starts_with('#')).count(), 8);
    let blocks = f.root.join("blocks.json");
    cli(&["--config", p(&f.config), "partition", "--manifest", p(&f.manifest), "--out", p(&blocks)]);
    assert!(blocks.exists());
    let depth = f.root.join("depth");
    cli(&["depth", "--manifest", p(&f.manifest), "--out", p(&depth)]);
    assert_eq!(std::fs::read_dir(&depth).unwrap().count(), 16);
    let table = cli(&["--config", p(&f.config), "eval", "--model", p(&f.model), "--manifest", p(&f.manifest)]);
    assert!(table.starts_with("method\tPSNR"));
    let nav = f.root.join("nav.png");
    let id = Dataset::open(&f.manifest).unwrap().manifest.images[0].id.clone();
    cli(&[
        "--config",
        p(&f.config),
        "navigate",
        "--model",
        p(&f.model),
        "--manifest",
        p(&f.manifest),
        "--image",
        &id,
        "--trip",
        "1",
        "--out",
        p(&nav),
    ]);
    assert!(nav.exists());
}

#[test]
fn unknown_block_fails_training() {
    let f = trained();
    let out = Command::new(env!("CARGO_BIN_EXE_streetfield"))
        .args(["--config", p(&f.config), "train", "--manifest", p(&f.manifest), "--out", p(&f.root.join("x")), "--block", "zz"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn missing_mask_is_reported_by_image() {
    let f = trained();
    let ds = Dataset::open(&f.manifest).unwrap();
    let victim = &ds.manifest.images[2];
    std::fs::remove_file(ds.resolve(&victim.mask)).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_streetfield"))
        .args(["select", "--manifest", p(&f.manifest)])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(&victim.id));
}

#[test]
fn sfm_filter_drops_cross_class_and_dynamic_matches() {
    let f = trained();
    let ds = Dataset::open(&f.manifest).unwrap();
    let (a, b) = (&ds.manifest.images[0].id, &ds.manifest.images[1].id);
    let feats = f.root.join("features");
    std::fs::create_dir_all(&feats).unwrap();
    std::fs::write(feats.join(format!("{a}.txt")), "1.0 1.0 1\n2.0 2.0 8\n3.0 3.0 5\n").unwrap();
    std::fs::write(feats.join(format!("{b}.txt")), "1.0 1.0 1\n2.0 2.0 1\n3.0 3.0 5\n").unwrap();
    let matches = f.root.join("matches.txt");
    std::fs::write(&matches, format!("# a b ia ib score\n{a} {b} 0 0 0.9\n{a} {b} 1 1 0.8\n{a} {b} 2 2 0.7\n")).unwrap();
    let out = f.root.join("kept.txt");
    cli(&[
        "sfm-filter",
        "--manifest",
        p(&f.manifest),
        "--matches",
        p(&matches),
        "--features",
        p(&feats),
        "--out",
        p(&out),
    ]);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), format!("{a} {b} 0 0 0.9\n"));
}
