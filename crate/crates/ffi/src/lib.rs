//! C ABI over `vpseg-core`.
//!
//! Every function returns a [`VpsegStatus`]; on failure the message is kept
//! per thread and can be copied out with [`vpseg_last_error_message`].
//! Objects are opaque handles created by `*_new`/`*_load` and released by
//! the matching `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use image::RgbImage;
use vpseg_core::dataset::{ClassTable, PanopticMap};
use vpseg_core::network::Network;
use vpseg_core::pipeline::{self, RunConfig};
use vpseg_core::stq::{self, StqAccumulator};
use vpseg_core::tracker::Tracker;
use vpseg_core::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VpsegStatus {
    Ok = 0,
    ShapeError = 1,
    FormatError = 2,
    RangeError = 3,
    ConfigError = 4,
    SamplingError = 5,
    IntegrityError = 6,
    CapacityError = 7,
    NumericError = 8,
    CheckpointError = 9,
    AlignmentError = 10,
    ContractError = 11,
    IoError = 12,
    /// A required pointer argument was null.
    NullArgument = 13,
    /// A string argument was not valid UTF-8.
    InvalidString = 14,
    /// Internal panic; the handle involved should be discarded.
    Panic = 15,
}

impl From<&Error> for VpsegStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } | Error::Axis { .. } | Error::NonScalarLoss(_) => Self::ShapeError,
            Error::Format { .. } => Self::FormatError,
            Error::Range(_) => Self::RangeError,
            Error::Config(_) => Self::ConfigError,
            Error::Sampling(_) => Self::SamplingError,
            Error::Integrity(_) => Self::IntegrityError,
            Error::Capacity { .. } => Self::CapacityError,
            Error::Numeric(_) => Self::NumericError,
            Error::Checkpoint { .. } => Self::CheckpointError,
            Error::Alignment(_) => Self::AlignmentError,
            Error::Contract(_) => Self::ContractError,
            Error::Io { .. } => Self::IoError,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(VpsegStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(VpsegStatus::from(&e), format!("{}: {e}", e.class()))
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VpsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            VpsegStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("Panic: internal error".into());
            VpsegStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(VpsegStatus::NullArgument, format!("NullArgument: {what} is null"))
}

unsafe fn string_arg(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure(VpsegStatus::InvalidString, format!("InvalidString: {what} is not UTF-8")))
}

unsafe fn optional_path(p: *const c_char, what: &str) -> Result<Option<PathBuf>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        string_arg(p, what).map(|s| Some(PathBuf::from(s)))
    }
}

unsafe fn classes_arg(p: *const c_char) -> Result<ClassTable, Failure> {
    Ok(match optional_path(p, "class table path")? {
        Some(path) => ClassTable::load(&path)?,
        None => ClassTable::default(),
    })
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vpseg_last_error_message(buf: *mut c_char, len: usize) -> usize {
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

/// `sqrt(aq * sq)`; inputs must lie in [0, 1].
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vpseg_compute_stq(aq: f64, sq: f64, out: *mut f64) -> VpsegStatus {
    guard(|| {
        *out_arg(out, "out")? = stq::compute_stq(aq, sq)?;
        Ok(())
    })
}

/// A trained network with its run configuration.
pub struct VpsegModel {
    config: RunConfig,
    classes: ClassTable,
    network: Network,
}

/// Loads a run configuration and a checkpoint.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vpseg_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut VpsegModel,
) -> VpsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let config = RunConfig::load(&PathBuf::from(string_arg(config_path, "config path")?))?;
        let classes = config.classes()?;
        let network = pipeline::load_network(&config, &PathBuf::from(string_arg(checkpoint_path, "checkpoint path")?))?;
        *out = Box::into_raw(Box::new(VpsegModel { config, classes, network }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`vpseg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vpseg_model_free(model: *mut VpsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Online tracker state for one sequence.
pub struct VpsegTracker {
    tracker: Tracker,
}

/// Starts a sequence with the model's tracker settings.
///
/// # Safety
/// `model` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vpseg_tracker_new(model: *const VpsegModel, out: *mut *mut VpsegTracker) -> VpsegStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out_arg(out, "out")?;
        let tracker = Tracker::new(model.config.tracker.clone(), model.classes.clone())?;
        *out = Box::into_raw(Box::new(VpsegTracker { tracker }));
        Ok(())
    })
}

/// Processes one frame of packed RGB8 pixels (`width * height * 3`
/// bytes, row-major) and writes `width * height` semantic and instance
/// ids. Void pixels get semantic 255.
///
/// # Safety
/// Handles must be live; `rgb` must hold `width * height * 3` bytes and
/// each output buffer `width * height` elements.
#[no_mangle]
pub unsafe extern "C" fn vpseg_tracker_step(
    tracker: *mut VpsegTracker,
    model: *const VpsegModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    out_semantic: *mut u16,
    out_instance: *mut u32,
) -> VpsegStatus {
    guard(|| {
        let tracker = tracker.as_mut().ok_or_else(|| null("tracker"))?;
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if rgb.is_null() || out_semantic.is_null() || out_instance.is_null() {
            return Err(null("pixel buffer"));
        }
        let n = width as usize * height as usize;
        let bytes = std::slice::from_raw_parts(rgb, n * 3).to_vec();
        let frame = RgbImage::from_raw(width, height, bytes)
            .ok_or_else(|| Error::Range(format!("bad frame size {width}x{height}")))?;
        let step = tracker.tracker.step(&model.network, &frame)?;
        std::slice::from_raw_parts_mut(out_semantic, n).copy_from_slice(step.panoptic.semantic());
        std::slice::from_raw_parts_mut(out_instance, n).copy_from_slice(step.panoptic.instance());
        Ok(())
    })
}

/// Number of live tracks.
///
/// # Safety
/// `tracker` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vpseg_tracker_live_count(tracker: *const VpsegTracker, out: *mut usize) -> VpsegStatus {
    guard(|| {
        let tracker = tracker.as_ref().ok_or_else(|| null("tracker"))?;
        *out_arg(out, "out")? = tracker.tracker.live_tracks().len();
        Ok(())
    })
}

/// # Safety
/// `tracker` must come from [`vpseg_tracker_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vpseg_tracker_free(tracker: *mut VpsegTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}

/// Streaming STQ accumulator over whole sequences.
pub struct VpsegEvaluator {
    classes: ClassTable,
    acc: StqAccumulator,
}

/// `class_table_path` may be null for the built-in taxonomy.
///
/// # Safety
/// `class_table_path` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vpseg_evaluator_new(
    class_table_path: *const c_char,
    out: *mut *mut VpsegEvaluator,
) -> VpsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let classes = classes_arg(class_table_path)?;
        *out = Box::into_raw(Box::new(VpsegEvaluator { classes, acc: StqAccumulator::new() }));
        Ok(())
    })
}

/// Adds one sequence of `frames` maps, each `width * height` ids,
/// concatenated frame after frame. Sequence names must be unique.
///
/// # Safety
/// `name` must be NUL-terminated; each id buffer must hold
/// `frames * width * height` elements.
#[no_mangle]
pub unsafe extern "C" fn vpseg_evaluator_add_sequence(
    evaluator: *mut VpsegEvaluator,
    name: *const c_char,
    frames: usize,
    width: u32,
    height: u32,
    pred_semantic: *const u16,
    pred_instance: *const u32,
    gt_semantic: *const u16,
    gt_instance: *const u32,
) -> VpsegStatus {
    guard(|| {
        let ev = evaluator.as_mut().ok_or_else(|| null("evaluator"))?;
        let name = string_arg(name, "name")?;
        if pred_semantic.is_null() || pred_instance.is_null() || gt_semantic.is_null() || gt_instance.is_null() {
            return Err(null("id buffer"));
        }
        let (w, h) = (width as usize, height as usize);
        let n = w * h;
        let maps = |sem: *const u16, inst: *const u32| -> Result<Vec<PanopticMap>, Failure> {
            let sem = std::slice::from_raw_parts(sem, n * frames);
            let inst = std::slice::from_raw_parts(inst, n * frames);
            (0..frames)
                .map(|f| {
                    let r = f * n..(f + 1) * n;
                    Ok(PanopticMap::new(w, h, sem[r.clone()].to_vec(), inst[r].to_vec())?)
                })
                .collect()
        };
        let pred = maps(pred_semantic, pred_instance)?;
        let gt = maps(gt_semantic, gt_instance)?;
        ev.acc.add_sequence(&name, &pred, &gt, &ev.classes)?;
        Ok(())
    })
}

/// Current STQ, AQ and SQ over every added sequence.
///
/// # Safety
/// `evaluator` must be live; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vpseg_evaluator_report(
    evaluator: *const VpsegEvaluator,
    stq: *mut f64,
    aq: *mut f64,
    sq: *mut f64,
) -> VpsegStatus {
    guard(|| {
        let ev = evaluator.as_ref().ok_or_else(|| null("evaluator"))?;
        let r = ev.acc.report(&ev.classes)?;
        *out_arg(stq, "stq")? = r.stq;
        *out_arg(aq, "aq")? = r.aq;
        *out_arg(sq, "sq")? = r.sq;
        Ok(())
    })
}

/// # Safety
/// `evaluator` must come from [`vpseg_evaluator_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vpseg_evaluator_free(evaluator: *mut VpsegEvaluator) {
    if !evaluator.is_null() {
        drop(Box::from_raw(evaluator));
    }
}

/// Runs training as configured; writes the checkpoint and log into the
/// configured output directory.
///
/// # Safety
/// `config_path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vpseg_train(config_path: *const c_char) -> VpsegStatus {
    guard(|| {
        let cfg = RunConfig::load(&PathBuf::from(string_arg(config_path, "config path")?))?;
        pipeline::run_train(&cfg, |_| {})?;
        Ok(())
    })
}

/// Scores `pred_root` against `gt_root` (dataset layout). `class_table_path`
/// and `report_dir` may be null.
///
/// # Safety
/// Strings must be NUL-terminated or null where allowed; outputs valid.
#[no_mangle]
pub unsafe extern "C" fn vpseg_eval_dirs(
    pred_root: *const c_char,
    gt_root: *const c_char,
    class_table_path: *const c_char,
    report_dir: *const c_char,
    stq: *mut f64,
    aq: *mut f64,
    sq: *mut f64,
) -> VpsegStatus {
    guard(|| {
        let pred = PathBuf::from(string_arg(pred_root, "prediction root")?);
        let gt = PathBuf::from(string_arg(gt_root, "ground-truth root")?);
        let classes = classes_arg(class_table_path)?;
        let report_dir = optional_path(report_dir, "report dir")?;
        let r = pipeline::run_eval(&pred, &gt, &classes, report_dir.as_deref())?;
        *out_arg(stq, "stq")? = r.stq;
        *out_arg(aq, "aq")? = r.aq;
        *out_arg(sq, "sq")? = r.sq;
        Ok(())
    })
}
