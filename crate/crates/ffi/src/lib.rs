//! C ABI over the `siamtrack` tracker.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Every fallible call returns a
//! [`SiamStatus`]; on failure [`siam_last_error`] describes the cause for
//! the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use siamtrack::image::Image;
use siamtrack::tracker::{self, TrackState};
use siamtrack::{checkpoint, heads, metrics, BBox, Config, Error};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiamStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Shape = 6,
    Numeric = 7,
    Panic = 8,
}

/// Axis-aligned box, top-left corner plus size, in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SiamBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<SiamBox> for BBox {
    fn from(b: SiamBox) -> Self {
        BBox::from_xywh(b.x, b.y, b.w, b.h)
    }
}

impl From<BBox> for SiamBox {
    fn from(b: BBox) -> Self {
        let [x, y, w, h] = b.to_xywh();
        SiamBox { x, y, w, h }
    }
}

/// Headline numbers of a one-pass evaluation.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SiamOpeSummary {
    pub precision_at_20: f64,
    pub success_auc: f64,
}

/// Network weights and configuration. Shareable across trackers.
pub struct SiamModel {
    inner: Arc<siamtrack::SiamModel>,
}

/// Per-target tracking state bound to one model.
pub struct SiamTracker {
    model: Arc<siamtrack::SiamModel>,
    state: TrackState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("interior nul removed"));
}

fn status_of(err: &Error) -> SiamStatus {
    match err {
        Error::ShapeMismatch { .. } | Error::InvalidShape { .. } | Error::NotScalar(_) => SiamStatus::Shape,
        Error::BackwardTwice | Error::Detached | Error::InvalidArgument(_) => SiamStatus::InvalidArgument,
        Error::Config(_) => SiamStatus::Config,
        Error::NonFiniteLoss { .. } => SiamStatus::Numeric,
        Error::Format { .. } => SiamStatus::Format,
        Error::Io { .. } => SiamStatus::Io,
    }
}

struct Failure(SiamStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SiamStatus::NullPointer, format!("{what} is null"))
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SiamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SiamStatus::Ok,
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
            set_error(format!("internal error: {msg}"));
            SiamStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SiamStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn image_arg(rgb: *const u8, width: usize, height: usize) -> Result<Image, Failure> {
    if rgb.is_null() {
        return Err(null("rgb"));
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Failure(SiamStatus::InvalidArgument, "image too large".into()))?;
    let data = std::slice::from_raw_parts(rgb, len).to_vec();
    Ok(Image::from_raw(width, height, data)?)
}

/// Message describing the last failure on this thread. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn siam_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Fresh model from a JSON configuration (NULL for defaults) and a weight
/// seed.
///
/// # Safety
/// `config_json` must be NULL or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn siam_model_new(config_json: *const c_char, seed: u64, out: *mut *mut SiamModel) -> SiamStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = if config_json.is_null() {
            Config::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Failure(SiamStatus::InvalidArgument, "config is not UTF-8".into()))?;
            Config::from_json(text)?
        };
        let model = siamtrack::SiamModel::new(config, seed)?;
        *out = Box::into_raw(Box::new(SiamModel { inner: Arc::new(model) }));
        Ok(())
    })
}

/// Load a checkpoint written by `siam_model_save` or the CLI.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn siam_model_load(path: *const c_char, out: *mut *mut SiamModel) -> SiamStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = checkpoint::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SiamModel { inner: Arc::new(model) }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn siam_model_save(model: *const SiamModel, path: *const c_char) -> SiamStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        checkpoint::save(&model.inner, &path_arg(path)?)?;
        Ok(())
    })
}

/// Number of scalar parameters, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn siam_model_num_params(model: *const SiamModel) -> u64 {
    model.as_ref().map_or(0, |m| m.inner.store.num_scalars() as u64)
}

/// # Safety
/// `model` must be NULL or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn siam_model_free(model: *mut SiamModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Start tracking `init` in an interleaved RGB frame. The tracker keeps
/// its own reference to the model.
///
/// # Safety
/// `model` must come from this library, `rgb` must hold
/// `width * height * 3` bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn siam_tracker_new(
    model: *const SiamModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    init: SiamBox,
    out: *mut *mut SiamTracker,
) -> SiamStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let frame = image_arg(rgb, width, height)?;
        let state = tracker::init(&model.inner, &frame, &init.into())?;
        *out = Box::into_raw(Box::new(SiamTracker {
            model: Arc::clone(&model.inner),
            state,
        }));
        Ok(())
    })
}

/// Locate the target in the next frame.
///
/// # Safety
/// `tracker` must come from this library, `rgb` must hold
/// `width * height * 3` bytes; `out_box` must be writable and `out_score`
/// NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn siam_tracker_update(
    tracker: *mut SiamTracker,
    rgb: *const u8,
    width: usize,
    height: usize,
    out_box: *mut SiamBox,
    out_score: *mut f64,
) -> SiamStatus {
    guard(|| {
        let t = tracker.as_mut().ok_or_else(|| null("tracker"))?;
        if out_box.is_null() {
            return Err(null("out_box"));
        }
        let frame = image_arg(rgb, width, height)?;
        let (b, score) = tracker::track_frame(&mut t.state, &t.model, &frame)?;
        *out_box = b.into();
        if !out_score.is_null() {
            *out_score = score;
        }
        Ok(())
    })
}

/// # Safety
/// `tracker` must be NULL or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn siam_tracker_free(tracker: *mut SiamTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}

/// Intersection over union of two boxes.
#[no_mangle]
pub extern "C" fn siam_iou(a: SiamBox, b: SiamBox) -> f64 {
    siamtrack::bbox::iou(&a.into(), &b.into())
}

/// IoU loss `-(1 - iou)(alpha - iou) ln(iou)`; `alpha` must lie in (1, 2].
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn siam_l_ious(iou: f64, alpha: f64, out: *mut f64) -> SiamStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = heads::l_ious(iou, alpha)?;
        Ok(())
    })
}

/// Precision at 20 px and success AUC of `len` predictions.
///
/// # Safety
/// `pred` and `gt` must each point to `len` boxes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn siam_eval_ope(
    pred: *const SiamBox,
    gt: *const SiamBox,
    len: usize,
    out: *mut SiamOpeSummary,
) -> SiamStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return Err(null("pred, gt or out"));
        }
        let convert = |p: *const SiamBox| -> Vec<BBox> {
            std::slice::from_raw_parts(p, len).iter().map(|&b| b.into()).collect()
        };
        let r = metrics::eval_ope(&convert(pred), &convert(gt))?;
        *out = SiamOpeSummary {
            precision_at_20: r.precision_at_20,
            success_auc: r.success_auc,
        };
        Ok(())
    })
}

/// Library version as a static C string.
#[no_mangle]
pub extern "C" fn siam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
