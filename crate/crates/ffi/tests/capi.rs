use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;

use streetfield::config::PipelineConfig;
use streetfield::field::FieldConfig;
use streetfield::manifest::write_dataset;
use streetfield::pipeline::{self, AppearanceChoice, ModelStore, RenderRequest};
use streetfield::render::RenderSettings;
use streetfield::synth::{make_trips, Scene, SynthConfig};
use streetfield::train::TrainConfig;
use streetfield_ffi::*;

fn config() -> PipelineConfig {
    PipelineConfig {
        field: FieldConfig {
            grid_resolutions: vec![4, 8],
            hidden_width: 8,
            ..Default::default()
        },
        train: TrainConfig {
            iterations: 4,
            batch_rays: 16,
            n_samples: 8,
            eval_samples: 8,
            ..Default::default()
        },
        render: RenderSettings {
            n_samples: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

struct Model {
    dir: tempfile::TempDir,
    request: RenderRequest,
}

impl Model {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn trained() -> Model {
    let synth = SynthConfig {
        n_trips: 2,
        images_per_trip: 3,
        width: 16,
        height: 12,
        focal: 12.0,
        ..Default::default()
    };
    let (_, data) = make_trips(&Scene::street(0), &synth).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    write_dataset(&dir.path().join("data"), &data.images, &data.trajectories).unwrap();
    std::fs::write(dir.path().join("cfg.toml"), cfg.to_toml().unwrap()).unwrap();
    let run = pipeline::run(&data.images, &cfg, "capi").unwrap();
    pipeline::write_run(&dir.path().join("model"), &run).unwrap();
    let request = RenderRequest {
        pose: data.images[0].camera_pose(),
        intrinsics: None,
        appearance_key: AppearanceChoice::default(),
        camera: 0,
        width: 10,
        height: 8,
        markers_on: true,
        trajectory_id: Some(1),
        block: None,
    };
    Model { dir, request }
}

fn c(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { sf_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(n, sf_last_error_length());
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn open(m: &Model) -> *mut SfModel {
    let mut h = std::ptr::null_mut();
    let status = unsafe {
        sf_model_open(
            c(&m.path("model")).as_ptr(),
            c(&m.path("cfg.toml")).as_ptr(),
            c(&m.path("data/manifest.json")).as_ptr(),
            &mut h,
        )
    };
    assert_eq!(status, SfStatus::Ok, "{}", last_error());
    assert!(!h.is_null());
    h
}

#[test]
fn png_matches_library_render() {
    let m = trained();
    let h = open(&m);
    let json = CString::new(serde_json::to_string(&m.request).unwrap()).unwrap();
    let mut buf = std::ptr::null_mut();
    assert_eq!(unsafe { sf_render_png(h, json.as_ptr(), &mut buf) }, SfStatus::Ok);
    let bytes = unsafe { std::slice::from_raw_parts(sf_buffer_data(buf), sf_buffer_len(buf)) }.to_vec();
    unsafe { sf_buffer_free(buf) };

    let cfg = PipelineConfig::load(&m.path("cfg.toml")).unwrap();
    let store = ModelStore::open(&m.path("model")).unwrap();
    let traj = streetfield::manifest::Dataset::open(m.path("data/manifest.json"))
        .unwrap()
        .load_trajectories()
        .unwrap();
    let expected = pipeline::render_request(&store, &m.request, &cfg, &traj).unwrap();
    assert_eq!(bytes, expected.png);

    let mut rgb = vec![0u8; 3 * 10 * 8];
    assert_eq!(
        unsafe { sf_render_rgb8(h, json.as_ptr(), rgb.as_mut_ptr(), rgb.len()) },
        SfStatus::Ok
    );
    assert_eq!(rgb, expected.image.to_rgb8());
    let mut count = 0;
    assert_eq!(unsafe { sf_model_block_count(h, &mut count) }, SfStatus::Ok);
    assert!(count >= 1);
    unsafe { sf_model_free(h) };
}

#[test]
fn failures_set_status_and_message() {
    let m = trained();
    let h = open(&m);
    let mut rgb = vec![0u8; 10];
    let json = CString::new(serde_json::to_string(&m.request).unwrap()).unwrap();
    assert_eq!(
        unsafe { sf_render_rgb8(h, json.as_ptr(), rgb.as_mut_ptr(), rgb.len()) },
        SfStatus::BufferTooSmall
    );
    assert!(last_error().contains("240"));

    let mut req = m.request.clone();
    req.block = Some("missing".into());
    let json = CString::new(serde_json::to_string(&req).unwrap()).unwrap();
    let mut buf = std::ptr::null_mut();
    assert_eq!(unsafe { sf_render_png(h, json.as_ptr(), &mut buf) }, SfStatus::NotFound);
    assert!(buf.is_null());
    assert!(last_error().contains("missing"));

    let bad = CString::new("{not json").unwrap();
    assert_eq!(unsafe { sf_render_png(h, bad.as_ptr(), &mut buf) }, SfStatus::Parse);
    assert_eq!(
        unsafe { sf_render_png(h, std::ptr::null(), &mut buf) },
        SfStatus::NullPointer
    );
    assert_eq!(
        unsafe { sf_render_png(std::ptr::null(), json.as_ptr(), &mut buf) },
        SfStatus::NullPointer
    );
    unsafe { sf_model_free(h) };

    let mut h = std::ptr::null_mut();
    let nowhere = c(&m.path("nowhere"));
    let status = unsafe { sf_model_open(nowhere.as_ptr(), std::ptr::null(), std::ptr::null(), &mut h) };
    assert_eq!(status, SfStatus::Io);
    assert!(h.is_null());
    assert!(!last_error().is_empty());
    unsafe { sf_model_free(std::ptr::null_mut()) };
    unsafe { sf_buffer_free(std::ptr::null_mut()) };
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(sf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include.join("streetfield.h").exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"streetfield.h\"\nint main(void) {\n  SfModel *m = 0;\n  SfStatus s = sf_model_open(0, 0, 0, &m);\n  sf_model_free(m);\n  return s == SF_STATUS_NULL_POINTER ? 0 : 1;\n}\n",
    )
    .unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = match Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I"])
            .arg(&include)
            .arg(&src)
            .status()
        {
            Ok(s) => s,
            Err(_) => {
                eprintln!("{compiler} not available; skipping");
                continue;
            }
        };
        assert!(status.success(), "{compiler} rejected the header");
    }
}
