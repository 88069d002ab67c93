//! C ABI over the gen4d dataset engine.
//!
//! Every fallible call returns a [`Gen4dStatus`]; on failure the message is
//! kept per thread and can be read with [`gen4d_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use gen4d::dataset::{compute_ap, validate_dataset, ValidationReport};
use gen4d::pipeline::{run_demo, PipelineConfig};
use gen4d::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gen4dStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    NonFinite = 4,
    Schema = 5,
    Io = 6,
    Model = 7,
    Denoiser = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Pipeline configuration.
pub struct Gen4dConfig {
    inner: PipelineConfig,
}

/// Result of a dataset validation.
pub struct Gen4dReport {
    inner: ValidationReport,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Gen4dDemoSummary {
    pub clips: usize,
    pub frames: usize,
    pub subjects: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> Gen4dStatus {
    match e {
        Error::Dimension(_) => Gen4dStatus::Dimension,
        Error::NonFinite(_) => Gen4dStatus::NonFinite,
        Error::InvalidArgument(_) | Error::BehindCamera { .. } => Gen4dStatus::InvalidArgument,
        Error::InvalidModel(_) | Error::DegenerateMesh(_) => Gen4dStatus::Model,
        Error::Schema { .. } | Error::Json { .. } => Gen4dStatus::Schema,
        Error::Io { .. } | Error::Image(_) => Gen4dStatus::Io,
        Error::Denoiser(_) => Gen4dStatus::Denoiser,
    }
}

fn fail(status: Gen4dStatus, msg: &str) -> Gen4dStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), Gen4dStatus>) -> Gen4dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            Gen4dStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(Gen4dStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: gen4d::Result<T>) -> Result<T, Gen4dStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Gen4dStatus> {
    if p.is_null() {
        return Err(fail(Gen4dStatus::NullPointer, &format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map(PathBuf::from).map_err(|_| {
        fail(
            Gen4dStatus::InvalidArgument,
            &format!("{name} is not UTF-8"),
        )
    })
}

unsafe fn write_str(
    s: &str,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> Result<(), Gen4dStatus> {
    if !needed.is_null() {
        *needed = s.len() + 1;
    }
    if buf.is_null() || len == 0 {
        return Ok(());
    }
    if len < s.len() + 1 {
        return Err(Gen4dStatus::BufferTooSmall);
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Null-terminated crate version; static, never freed.
#[no_mangle]
pub extern "C" fn gen4d_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the calling thread's last error message into `buf`.
/// `needed` (optional) receives the size including the terminator.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null; `needed` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn gen4d_last_error(
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> Gen4dStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().to_string_lossy().into_owned());
    match write_str(&msg, buf, len, needed) {
        Ok(()) => Gen4dStatus::Ok,
        Err(s) => s,
    }
}

/// Default configuration.
#[no_mangle]
pub extern "C" fn gen4d_config_default() -> *mut Gen4dConfig {
    Box::into_raw(Box::new(Gen4dConfig {
        inner: PipelineConfig::default(),
    }))
}

/// Loads a JSON configuration file.
///
/// # Safety
/// `path` must be a null-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gen4d_config_load(
    path: *const c_char,
    out: *mut *mut Gen4dConfig,
) -> Gen4dStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(Gen4dStatus::NullPointer, "out is null"));
        }
        let path = path_arg(path, "path")?;
        let inner = lift(PipelineConfig::load(&path))?;
        *out = Box::into_raw(Box::new(Gen4dConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn gen4d_config_set_seed(cfg: *mut Gen4dConfig, seed: u64) -> Gen4dStatus {
    guard(|| {
        let cfg = cfg
            .as_mut()
            .ok_or_else(|| fail(Gen4dStatus::NullPointer, "config is null"))?;
        cfg.inner.seed = seed;
        Ok(())
    })
}

/// Sets the demo's frames per clip and square frame side.
///
/// # Safety
/// `cfg` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn gen4d_config_set_demo_size(
    cfg: *mut Gen4dConfig,
    frames: usize,
    resolution: usize,
) -> Gen4dStatus {
    guard(|| {
        let cfg = cfg
            .as_mut()
            .ok_or_else(|| fail(Gen4dStatus::NullPointer, "config is null"))?;
        if frames == 0 || resolution < 8 {
            return Err(fail(
                Gen4dStatus::InvalidArgument,
                "need frames >= 1 and resolution >= 8",
            ));
        }
        cfg.inner.demo.frames = frames;
        cfg.inner.demo.resolution = resolution;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn gen4d_config_free(cfg: *mut Gen4dConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generates the demo dataset into `out_dir`; relative paths resolve against `root`.
///
/// # Safety
/// Strings must be null-terminated; `cfg` must come from this library;
/// `summary` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn gen4d_run_demo(
    cfg: *const Gen4dConfig,
    root: *const c_char,
    out_dir: *const c_char,
    summary: *mut Gen4dDemoSummary,
) -> Gen4dStatus {
    guard(|| {
        let cfg = cfg
            .as_ref()
            .ok_or_else(|| fail(Gen4dStatus::NullPointer, "config is null"))?;
        let root = path_arg(root, "root")?;
        let out = root.join(path_arg(out_dir, "out_dir")?);
        let s = lift(run_demo(&cfg.inner, &root, &out))?;
        if let Some(summary) = summary.as_mut() {
            let clips = s.manifest.splits.iter().map(|(_, e)| e.clip_count).sum();
            *summary = Gen4dDemoSummary {
                clips,
                frames: s.manifest.total_frames(),
                subjects: s.avatars.len(),
            };
        }
        Ok(())
    })
}

/// Checks a dataset on disk. A report with violations is still `Ok`.
///
/// # Safety
/// `root` must be null-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gen4d_validate(
    root: *const c_char,
    out: *mut *mut Gen4dReport,
) -> Gen4dStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(Gen4dStatus::NullPointer, "out is null"));
        }
        let root = path_arg(root, "root")?;
        let inner = lift(validate_dataset(&root))?;
        *out = Box::into_raw(Box::new(Gen4dReport { inner }));
        Ok(())
    })
}

/// # Safety
/// `report` must come from [`gen4d_validate`] or be null.
#[no_mangle]
pub unsafe extern "C" fn gen4d_report_violation_count(report: *const Gen4dReport) -> usize {
    report.as_ref().map_or(0, |r| r.inner.violations.len())
}

/// # Safety
/// `report` must come from [`gen4d_validate`] or be null.
#[no_mangle]
pub unsafe extern "C" fn gen4d_report_frames_checked(report: *const Gen4dReport) -> usize {
    report.as_ref().map_or(0, |r| r.inner.frames_checked)
}

/// Copies violation `index` as `location: message`.
///
/// # Safety
/// `report` must come from [`gen4d_validate`]; `buf` valid for `len` bytes or
/// null; `needed` valid or null.
#[no_mangle]
pub unsafe extern "C" fn gen4d_report_violation(
    report: *const Gen4dReport,
    index: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> Gen4dStatus {
    guard(|| {
        let r = report
            .as_ref()
            .ok_or_else(|| fail(Gen4dStatus::NullPointer, "report is null"))?;
        let v = r.inner.violations.get(index).ok_or_else(|| {
            fail(
                Gen4dStatus::InvalidArgument,
                &format!("no violation {index}"),
            )
        })?;
        let text = v.to_string();
        write_str(&text, buf, len, needed)
            .map_err(|s| fail(s, &format!("violation needs {} bytes", text.len() + 1)))
    })
}

/// # Safety
/// `report` must come from [`gen4d_validate`] or be null.
#[no_mangle]
pub unsafe extern "C" fn gen4d_report_free(report: *mut Gen4dReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Keypoint accuracy in percent for each threshold.
///
/// `pred` holds `frames × keypoints × 2` values `(u, v)`, `gt` holds
/// `frames × keypoints × 3` values `(u, v, visible)`; `out` receives
/// `n_thresholds` values.
///
/// # Safety
/// Every pointer must be valid for the sizes above.
#[no_mangle]
pub unsafe extern "C" fn gen4d_compute_ap(
    pred: *const f64,
    gt: *const f64,
    frames: usize,
    keypoints: usize,
    thresholds: *const f64,
    n_thresholds: usize,
    out: *mut f64,
) -> Gen4dStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || thresholds.is_null() || out.is_null() {
            return Err(fail(Gen4dStatus::NullPointer, "null array"));
        }
        if keypoints == 0 {
            return Err(fail(
                Gen4dStatus::InvalidArgument,
                "keypoints must be positive",
            ));
        }
        let p = std::slice::from_raw_parts(pred, frames * keypoints * 2);
        let g = std::slice::from_raw_parts(gt, frames * keypoints * 3);
        let t = std::slice::from_raw_parts(thresholds, n_thresholds);
        let preds: Vec<Vec<[f64; 2]>> = p
            .chunks_exact(keypoints * 2)
            .map(|f| f.chunks_exact(2).map(|k| [k[0], k[1]]).collect())
            .collect();
        let gts: Vec<Vec<[f64; 3]>> = g
            .chunks_exact(keypoints * 3)
            .map(|f| f.chunks_exact(3).map(|k| [k[0], k[1], k[2]]).collect())
            .collect();
        let ap = lift(compute_ap(&preds, &gts, t))?;
        std::ptr::copy_nonoverlapping(ap.as_ptr(), out, ap.len());
        Ok(())
    })
}
