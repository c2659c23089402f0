//! C ABI over the radiomap library.
//!
//! Objects cross the boundary as opaque pointers created by `*_new`/`*_load`
//! and released with the matching `*_free`. Every fallible call returns an
//! [`RmStatus`]; on failure a message is kept per thread and can be read
//! with [`rm_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::{Array2, ArrayView2};
use radiomap::checkpoint::CheckpointError;
use radiomap::domain::{BaseStation, EnvironmentScene};
use radiomap::metrics::{score, EvalDomain};
use radiomap::pipeline::{PipelineError, RadioMapModel};
use radiomap::sim::{compute_pathloss, OracleConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    BadCheckpoint = 4,
    Runtime = 5,
    Panic = 6,
}

/// Trained model handle.
pub struct RmModel(RadioMapModel);

/// Environment scene handle.
pub struct RmScene(EnvironmentScene);

/// Quality of one prediction against a reference.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RmMetrics {
    pub nmse: f64,
    pub rmse: f64,
    pub ssim: f64,
    /// `INFINITY` for an exact match.
    pub psnr: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

struct Fail(RmStatus, String);

impl From<PipelineError> for Fail {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Checkpoint(CheckpointError::Io { .. }) => RmStatus::Io,
            PipelineError::Checkpoint(_) => RmStatus::BadCheckpoint,
            PipelineError::SceneSize { .. } => RmStatus::InvalidArgument,
            _ => RmStatus::Runtime,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RmStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(RmStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(RmStatus::InvalidArgument, msg.into())
}

/// Borrows `len` elements, rejecting null.
unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn square(data: &[f64], n: usize) -> Array2<f64> {
    ArrayView2::from_shape((n, n), data).expect("length checked").to_owned()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn rm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a scene from two row-major `n*n` masks (nonzero = occupied) and a
/// transmitter cell.
///
/// # Safety
/// `static_mask` and `dynamic_mask` must point to `n*n` readable bytes and
/// `out` to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn rm_scene_new(
    n: usize,
    static_mask: *const u8,
    dynamic_mask: *const u8,
    bs_row: usize,
    bs_col: usize,
    out: *mut *mut RmScene,
) -> RmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let len = n.checked_mul(n).ok_or_else(|| invalid("n overflows"))?;
        let bin = |v: &u8| u8::from(*v != 0);
        let s = Array2::from_shape_vec((n, n), slice_in(static_mask, len, "static_mask")?.iter().map(bin).collect())
            .expect("length checked");
        let d = Array2::from_shape_vec((n, n), slice_in(dynamic_mask, len, "dynamic_mask")?.iter().map(bin).collect())
            .expect("length checked");
        let scene = EnvironmentScene::new(s, d, BaseStation::at(bs_row, bs_col)).map_err(|e| invalid(e.to_string()))?;
        *out = Box::into_raw(Box::new(RmScene(scene)));
        Ok(())
    })
}

/// # Safety
/// `scene` must come from [`rm_scene_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rm_scene_free(scene: *mut RmScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Side length of the scene grid, 0 for null.
///
/// # Safety
/// `scene` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rm_scene_size(scene: *const RmScene) -> usize {
    scene.as_ref().map_or(0, |s| s.0.size())
}

/// Ground-truth gray map from the built-in propagation oracle with default
/// parameters, written row-major into `out` (`len` must be `n*n`).
///
/// # Safety
/// `scene` must be a live handle and `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rm_oracle_gray(scene: *const RmScene, out: *mut f64, len: usize) -> RmStatus {
    guard(|| {
        let scene = scene.as_ref().ok_or_else(|| null("scene"))?;
        let n = scene.0.size();
        if len != n * n {
            return Err(invalid(format!("output holds {len} values, need {}", n * n)));
        }
        let out = slice_out(out, len, "out")?;
        let rm = compute_pathloss(&scene.0, &OracleConfig::default()).map_err(|e| Fail(RmStatus::Runtime, e.to_string()))?;
        out.iter_mut().zip(rm.gray.iter()).for_each(|(o, g)| *o = *g);
        Ok(())
    })
}

/// Loads a diffusion checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rm_model_load(path: *const c_char, out: *mut *mut RmModel) -> RmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let model = RadioMapModel::load(&PathBuf::from(path))?;
        *out = Box::into_raw(Box::new(RmModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`rm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rm_model_free(model: *mut RmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Grid size the model was trained on, 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rm_model_image_size(model: *const RmModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.image_size())
}

/// Samples a gray map for `scene` with `steps` reverse steps. The result is
/// row-major in `out`, which must hold `n*n` values.
///
/// # Safety
/// Both handles must be live and `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rm_model_infer(
    model: *const RmModel,
    scene: *const RmScene,
    steps: usize,
    seed: u64,
    out: *mut f64,
    len: usize,
) -> RmStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let scene = scene.as_ref().ok_or_else(|| null("scene"))?;
        if steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        let n = scene.0.size();
        if len != n * n {
            return Err(invalid(format!("output holds {len} values, need {}", n * n)));
        }
        let out = slice_out(out, len, "out")?;
        let gray = model.0.infer(&scene.0, steps, seed)?;
        out.iter_mut().zip(gray.iter()).for_each(|(o, g)| *o = *g);
        Ok(())
    })
}

/// NMSE, RMSE, SSIM and PSNR of two row-major `n*n` gray maps.
///
/// # Safety
/// `pred` and `truth` must hold `n*n` readable doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_metrics(pred: *const f64, truth: *const f64, n: usize, out: *mut RmMetrics) -> RmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = n.checked_mul(n).ok_or_else(|| invalid("n overflows"))?;
        let p = square(slice_in(pred, len, "pred")?, n);
        let t = square(slice_in(truth, len, "truth")?, n);
        let m = score("ffi", &p, &t, EvalDomain::Gray).map_err(|e| invalid(e.to_string()))?;
        *out = RmMetrics {
            nmse: m.nmse,
            rmse: m.rmse,
            ssim: m.ssim,
            psnr: m.psnr,
        };
        Ok(())
    })
}
