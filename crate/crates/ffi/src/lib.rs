//! C ABI over the neurodecode pipeline.
//!
//! Configs and run directories are opaque handles created and freed by
//! this library. Every fallible call returns an [`NdStatus`]; the message
//! for the most recent failure on the calling thread is available from
//! [`nd_last_error`]. Panics are caught at the boundary and reported as
//! [`NdStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::{Array2, Array3};

use neurodecode::config::ExperimentConfig;
use neurodecode::metrics::{self, MetricReport};
use neurodecode::pipeline::{run_stage, RunDir, Stage};
use neurodecode::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    MissingArtifact = 5,
    Numerical = 6,
    Locked = 7,
    Io = 8,
    Format = 9,
    Panic = 10,
}

impl From<&Error> for NdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::ClipOutOfRange { .. } | Error::UnknownNetwork(_) | Error::UnknownExtractor(_) => {
                NdStatus::InvalidArgument
            }
            Error::Config(_) => NdStatus::Config,
            Error::MissingArtifact { .. } => NdStatus::MissingArtifact,
            Error::Numerical(_) | Error::Degenerate(_) => NdStatus::Numerical,
            Error::Locked(_) => NdStatus::Locked,
            Error::Io(_) => NdStatus::Io,
            Error::Format { .. } | Error::Json(_) | Error::Image(_) => NdStatus::Format,
        }
    }
}

/// Opaque experiment configuration.
pub struct NdConfig {
    inner: ExperimentConfig,
}

/// Opaque run directory.
pub struct NdRun {
    inner: RunDir,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(NdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(NdStatus::from(&e), e.to_string())
    }
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("panic: {msg}"));
            NdStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(NdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(NdStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Result<Array2<f64>, Failure> {
    Array2::from_shape_vec((rows, cols), data.to_vec()).map_err(|e| Failure(NdStatus::InvalidArgument, e.to_string()))
}

/// Message of the calling thread's most recent failure, or null. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default desk configuration. Free with [`nd_config_free`].
#[no_mangle]
pub extern "C" fn nd_config_default() -> *mut NdConfig {
    Box::into_raw(Box::new(NdConfig { inner: ExperimentConfig::default() }))
}

/// Loads a JSON config file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nd_config_from_file(path: *const c_char, out: *mut *mut NdConfig) -> NdStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let inner = ExperimentConfig::from_file(std::path::Path::new(path))?;
        *out = Box::into_raw(Box::new(NdConfig { inner }));
        Ok(())
    })
}

/// Applies one `key=value` override with a dotted key.
///
/// # Safety
/// `config` must come from this library; `assignment` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nd_config_set(config: *mut NdConfig, assignment: *const c_char) -> NdStatus {
    guard(|| {
        let config = out_arg(config, "config")?;
        let a = str_arg(assignment, "assignment")?;
        config.inner = config.inner.with_overrides(&[a])?;
        Ok(())
    })
}

/// Writes the config hash (64 hex characters plus NUL) into `buf`.
///
/// # Safety
/// `config` must come from this library; `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn nd_config_hash(config: *const NdConfig, buf: *mut c_char, len: usize) -> NdStatus {
    guard(|| {
        let config = config.as_ref().ok_or_else(|| null("config"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let hash = config.inner.resolved()?.hash()?;
        if len < hash.len() + 1 {
            return Err(Failure(NdStatus::InvalidArgument, format!("buffer of {len} bytes cannot hold {} + 1", hash.len())));
        }
        ptr::copy_nonoverlapping(hash.as_ptr().cast(), buf, hash.len());
        *buf.add(hash.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn nd_config_free(config: *mut NdConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Opens (without creating) a run directory handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nd_run_open(path: *const c_char, out: *mut *mut NdRun) -> NdStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(NdRun { inner: RunDir::new(PathBuf::from(path)) }));
        Ok(())
    })
}

/// Runs one stage by name (`synth`, `preprocess`, ..., `report`). Sets
/// `*cached` to 1 when the stage was already current and 0 otherwise.
///
/// # Safety
/// Handles must come from this library; `stage` must be NUL-terminated;
/// `cached` may be null.
#[no_mangle]
pub unsafe extern "C" fn nd_run_stage(run: *const NdRun, config: *const NdConfig, stage: *const c_char, cached: *mut i32) -> NdStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let config = config.as_ref().ok_or_else(|| null("config"))?;
        let name = str_arg(stage, "stage")?;
        let stage = Stage::from_name(name).ok_or_else(|| Failure(NdStatus::InvalidArgument, format!("unknown stage `{name}`")))?;
        let outcome = run_stage(&run.inner, stage, &config.inner)?;
        if let Some(c) = cached.as_mut() {
            *c = i32::from(outcome.status == neurodecode::pipeline::StageStatus::Cached);
        }
        Ok(())
    })
}

/// Reads one value from the run's `metrics.json`.
///
/// # Safety
/// `run` must come from this library; `name` must be NUL-terminated;
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nd_run_metric(run: *const NdRun, name: *const c_char, out: *mut f64) -> NdStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let name = str_arg(name, "name")?;
        let out = out_arg(out, "out")?;
        let path = run.inner.path("metrics.json");
        if !path.exists() {
            return Err(Error::MissingArtifact { stage: "evaluate".into(), path }.into());
        }
        let text = std::fs::read_to_string(&path).map_err(Error::from)?;
        let report: MetricReport = serde_json::from_str(&text).map_err(Error::from)?;
        *out = report.value(name).ok_or_else(|| Failure(NdStatus::InvalidArgument, format!("no metric `{name}`")))?;
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn nd_run_free(run: *mut NdRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Symmetric contrastive loss of two row-major `[n × d]` batches of unit
/// rows at temperature `tau`.
///
/// # Safety
/// `z1` and `z2` must each point to `n * d` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nd_clip_loss(z1: *const f64, z2: *const f64, n: usize, d: usize, tau: f64, out: *mut f64) -> NdStatus {
    guard(|| {
        let a = matrix(slice_arg(z1, n * d, "z1")?, n, d)?;
        let b = matrix(slice_arg(z2, n * d, "z2")?, n, d)?;
        *out_arg(out, "out")? = neurodecode::contrast::clip_loss(&a, &b, tau)?;
        Ok(())
    })
}

/// Mean of `1 − cos(u_i, v_j)` over all row pairs of `[nu × d]` and
/// `[nv × d]` row-major matrices.
///
/// # Safety
/// `u` must hold `nu * d` doubles, `v` must hold `nv * d`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nd_mean_cosine_distance(u: *const f64, nu: usize, v: *const f64, nv: usize, d: usize, out: *mut f64) -> NdStatus {
    guard(|| {
        let a = matrix(slice_arg(u, nu * d, "u")?, nu, d)?;
        let b = matrix(slice_arg(v, nv * d, "v")?, nv, d)?;
        *out_arg(out, "out")? = metrics::mean_cosine_distance(&a, &b)?;
        Ok(())
    })
}

/// Pixel correlation and SSIM of two `[h × w × 3]` row-major images with
/// values in `[0, 1]`. Either output pointer may be null.
///
/// # Safety
/// `a` and `b` must each hold `h * w * 3` doubles.
#[no_mangle]
pub unsafe extern "C" fn nd_image_similarity(a: *const f64, b: *const f64, h: usize, w: usize, pixcorr: *mut f64, ssim: *mut f64) -> NdStatus {
    guard(|| {
        let n = h * w * 3;
        let img = |p, what| -> Result<Array3<f64>, Failure> {
            Array3::from_shape_vec((h, w, 3), slice_arg(p, n, what)?.to_vec()).map_err(|e| Failure(NdStatus::InvalidArgument, e.to_string()))
        };
        let (ia, ib) = (img(a, "a")?, img(b, "b")?);
        if let Some(o) = pixcorr.as_mut() {
            *o = metrics::pixcorr(&ia, &ib)?;
        }
        if let Some(o) = ssim.as_mut() {
            *o = metrics::ssim(&ia, &ib)?;
        }
        Ok(())
    })
}
