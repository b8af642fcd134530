//! C ABI over trained street models: open a model directory, render a JSON
//! request to PNG or raw RGB, query blocks. Every call returns an
//! [`SfStatus`]; the message of the last failure on the calling thread is
//! available through [`sf_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use streetfield::config::PipelineConfig;
use streetfield::manifest::Dataset;
use streetfield::nav::GuidanceTrajectory;
use streetfield::pipeline::{render_request, ModelStore, RenderRequest};
use streetfield::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    Io = 4,
    Parse = 5,
    Checkpoint = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// A loaded model directory with its configuration and trajectories.
pub struct SfModel {
    store: ModelStore,
    config: PipelineConfig,
    trajectories: Vec<GuidanceTrajectory>,
}

/// Owned bytes returned to the caller.
pub struct SfBuffer {
    data: Vec<u8>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> SfStatus {
    match e {
        Error::NotFound(_) | Error::UnknownSequence(_) | Error::UnknownCamera(_) => SfStatus::NotFound,
        Error::Io(_) => SfStatus::Io,
        Error::Parse { .. } | Error::Json(_) => SfStatus::Parse,
        Error::Checkpoint(_) => SfStatus::Checkpoint,
        Error::Stage { source, .. } => status_of(source),
        Error::Image(_) | Error::Diverged { .. } => SfStatus::Internal,
        _ => SfStatus::InvalidArgument,
    }
}

fn fail(status: SfStatus, msg: impl Into<String>) -> SfStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), SfStatus>) -> SfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SfStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(SfStatus::Internal, "panic inside streetfield"),
    }
}

fn lib(e: Error) -> SfStatus {
    fail(status_of(&e), e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, SfStatus> {
    if p.is_null() {
        return Err(fail(SfStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SfStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, SfStatus> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn model_arg<'a>(p: *const SfModel) -> Result<&'a SfModel, SfStatus> {
    p.as_ref().ok_or_else(|| fail(SfStatus::NullPointer, "model is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the last error message on this thread, without NUL.
#[no_mangle]
pub extern "C" fn sf_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message into `buf` with a NUL terminator,
/// truncating to `len - 1` bytes. Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn sf_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Opens a model directory. `config_path` and `manifest_path` may be null:
/// the default configuration is used and no trajectories are loaded.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_model_open(
    model_dir: *const c_char,
    config_path: *const c_char,
    manifest_path: *const c_char,
    out: *mut *mut SfModel,
) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(SfStatus::NullPointer, "out is null"));
        }
        *out = std::ptr::null_mut();
        let dir = str_arg(model_dir, "model_dir")?;
        let config = PipelineConfig::load_or_default(opt_str_arg(config_path, "config_path")?.map(Path::new)).map_err(lib)?;
        let trajectories = match opt_str_arg(manifest_path, "manifest_path")? {
            Some(m) => Dataset::open(m).and_then(|d| d.load_trajectories()).map_err(lib)?,
            None => Vec::new(),
        };
        let store = ModelStore::open(Path::new(dir)).map_err(lib)?;
        *out = Box::into_raw(Box::new(SfModel {
            store,
            config,
            trajectories,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`sf_model_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_model_free(model: *mut SfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of blocks that have a trained model.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sf_model_block_count(model: *const SfModel, out: *mut usize) -> SfStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(fail(SfStatus::NullPointer, "out is null"));
        }
        *out = m.store.trained_ids().count();
        Ok(())
    })
}

fn render(m: &SfModel, json: &str) -> Result<streetfield::pipeline::RenderResult, SfStatus> {
    let req: RenderRequest = serde_json::from_str(json).map_err(|e| lib(e.into()))?;
    render_request(&m.store, &req, &m.config, &m.trajectories).map_err(lib)
}

/// Renders a JSON request (the `POST /render` body) to PNG bytes.
///
/// # Safety
/// `model` must be a live handle, `request_json` NUL-terminated and `out`
/// writable. The buffer is released with [`sf_buffer_free`].
#[no_mangle]
pub unsafe extern "C" fn sf_render_png(
    model: *const SfModel,
    request_json: *const c_char,
    out: *mut *mut SfBuffer,
) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(SfStatus::NullPointer, "out is null"));
        }
        *out = std::ptr::null_mut();
        let m = model_arg(model)?;
        let result = render(m, str_arg(request_json, "request_json")?)?;
        *out = Box::into_raw(Box::new(SfBuffer { data: result.png }));
        Ok(())
    })
}

/// Renders a JSON request into caller memory as row-major RGB8.
/// `capacity` must be at least `3 * width * height`.
///
/// # Safety
/// `model` must be a live handle, `request_json` NUL-terminated and
/// `pixels` valid for `capacity` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn sf_render_rgb8(
    model: *const SfModel,
    request_json: *const c_char,
    pixels: *mut u8,
    capacity: usize,
) -> SfStatus {
    guard(|| {
        let m = model_arg(model)?;
        if pixels.is_null() {
            return Err(fail(SfStatus::NullPointer, "pixels is null"));
        }
        let rgb = render(m, str_arg(request_json, "request_json")?)?.image.to_rgb8();
        if rgb.len() > capacity {
            return Err(fail(
                SfStatus::BufferTooSmall,
                format!("need {} bytes, capacity {capacity}", rgb.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(rgb.as_ptr(), pixels, rgb.len());
        Ok(())
    })
}

/// # Safety
/// `buf` must be a live buffer.
#[no_mangle]
pub unsafe extern "C" fn sf_buffer_data(buf: *const SfBuffer) -> *const u8 {
    buf.as_ref().map_or(std::ptr::null(), |b| b.data.as_ptr())
}

/// # Safety
/// `buf` must be null or a live buffer.
#[no_mangle]
pub unsafe extern "C" fn sf_buffer_len(buf: *const SfBuffer) -> usize {
    buf.as_ref().map_or(0, |b| b.data.len())
}

/// # Safety
/// `buf` must be null or a buffer not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_buffer_free(buf: *mut SfBuffer) {
    if !buf.is_null() {
        drop(Box::from_raw(buf));
    }
}
