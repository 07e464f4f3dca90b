//! C ABI over the videopure lab.
//!
//! Handles are opaque pointers created by `vp_*_new`/`vp_*_load` and released
//! with the matching `vp_*_free`. Every fallible call returns a `VpStatus`;
//! on failure `vp_last_error_message` describes the most recent error on the
//! calling thread. Videos are passed as contiguous `float` buffers in
//! frames × height × width × channels order, values in [0, 1].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use videopure::attack::{pgd, AttackTarget, Bpda, BpdaMode, GrayBox};
use videopure::harness::{AttackKind, AttackSpec, DefenseSpec, ExperimentConfig, Stack};
use videopure::nn::{classify, Model, VideoClassifier};
use videopure::purify::Purifier;
use videopure::video::{FlowField, VideoShape, VideoTensor};
use videopure::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Numeric = 6,
    Training = 7,
    Purification = 8,
    Attack = 9,
    Internal = 10,
    Panic = 11,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| {
        let mut b = msg.into_bytes();
        b.retain(|&c| c != 0);
        *e.borrow_mut() = b;
    });
}

fn status_of(e: &Error) -> VpStatus {
    match e {
        Error::InvalidArgument(_) => VpStatus::InvalidArgument,
        Error::Numeric(_) => VpStatus::Numeric,
        Error::Format { .. } | Error::Json(_) => VpStatus::Format,
        Error::Training { .. } => VpStatus::Training,
        Error::Purification { .. } => VpStatus::Purification,
        Error::Attack { .. } => VpStatus::Attack,
        Error::Config(_) => VpStatus::Config,
        Error::Io { .. } => VpStatus::Io,
        Error::Tensor(_) => VpStatus::Internal,
    }
}

struct Fail(VpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VpStatus::Ok,
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("panic inside videopure".into());
            VpStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(VpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    Ok(PathBuf::from(str_arg(p, what)?))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(VpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn video_arg(data: *const f32, frames: usize, height: usize, width: usize, channels: usize) -> Result<VideoTensor, Fail> {
    if data.is_null() {
        return Err(null("video"));
    }
    let shape = VideoShape::new(frames, height, width, channels);
    let v = std::slice::from_raw_parts(data, shape.len()).to_vec();
    Ok(VideoTensor::new(shape, v)?)
}

unsafe fn flow_arg(flow: *const f32, frames: usize, height: usize, width: usize) -> Result<Option<FlowField>, Fail> {
    if flow.is_null() {
        return Ok(None);
    }
    let pairs = frames.saturating_sub(1);
    let v = std::slice::from_raw_parts(flow, pairs * height * width * 2).to_vec();
    Ok(Some(FlowField::new(pairs, height, width, v)?))
}

unsafe fn write_out<T: Copy>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = v;
    Ok(())
}

/// Frozen models loaded from an experiment config.
pub struct VpStack {
    stack: Stack,
}

/// One configured defense.
pub struct VpDefense {
    purifier: Box<dyn Purifier>,
}

/// A standalone video classifier.
pub struct VpClassifier {
    model: VideoClassifier,
}

/// Length in bytes of the last error message on this thread (0 when none).
#[no_mangle]
pub extern "C" fn vp_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message into `buf` as a NUL-terminated string, truncating to `len - 1` bytes.
/// Returns the number of bytes written, excluding the terminator.
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vp_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let n = e.len().min(len - 1);
        ptr::copy_nonoverlapping(e.as_ptr() as *const c_char, buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// Static NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn vp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads the models named by an experiment config file.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vp_stack_load(config_path: *const c_char, out: *mut *mut VpStack) -> VpStatus {
    guard(|| {
        let p = path_arg(config_path, "config_path")?;
        let cfg = ExperimentConfig::load(&p)?;
        let stack = Stack::load(&cfg)?;
        write_out(out, Box::into_raw(Box::new(VpStack { stack })))
    })
}

/// # Safety
/// `stack` must come from `vp_stack_load` and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn vp_stack_free(stack: *mut VpStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}

/// Builds a defense from a JSON spec such as `{"name":"jpeg","quality":75}`.
///
/// # Safety
/// `stack` must be a live handle, `spec_json` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vp_defense_new(stack: *const VpStack, spec_json: *const c_char, out: *mut *mut VpDefense) -> VpStatus {
    guard(|| {
        let s = stack.as_ref().ok_or_else(|| null("stack"))?;
        let spec: DefenseSpec = serde_json::from_str(str_arg(spec_json, "spec_json")?)
            .map_err(|e| Fail(VpStatus::Config, format!("bad defense spec: {e}")))?;
        let purifier = s.stack.defense(&spec)?;
        write_out(out, Box::into_raw(Box::new(VpDefense { purifier })))
    })
}

/// # Safety
/// `defense` must come from `vp_defense_new` and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn vp_defense_free(defense: *mut VpDefense) {
    if !defense.is_null() {
        drop(Box::from_raw(defense));
    }
}

/// Purifies and writes the last candidate (the final denoised video) to `out_video`,
/// which must hold as many floats as the input. `flow` may be null; otherwise it holds
/// (frames − 1) × height × width × 2 floats.
///
/// # Safety
/// All non-null pointers must be valid for the sizes above.
#[no_mangle]
pub unsafe extern "C" fn vp_defense_purify(
    defense: *const VpDefense,
    video: *const f32,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    flow: *const f32,
    seed: u64,
    out_video: *mut f32,
) -> VpStatus {
    guard(|| {
        let d = defense.as_ref().ok_or_else(|| null("defense"))?;
        let x = video_arg(video, frames, height, width, channels)?;
        let f = flow_arg(flow, frames, height, width)?;
        if out_video.is_null() {
            return Err(null("out_video"));
        }
        let p = d.purifier.purify(&x, f.as_ref(), seed)?;
        let last = p.candidates.last().ok_or_else(|| Fail(VpStatus::Internal, "defense produced no candidate".into()))?;
        ptr::copy_nonoverlapping(last.data().as_ptr(), out_video, last.data().len());
        Ok(())
    })
}

/// Defended prediction: purify, classify every candidate, vote.
///
/// # Safety
/// As for `vp_defense_purify`; `out_class` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vp_defense_predict(
    stack: *const VpStack,
    defense: *const VpDefense,
    video: *const f32,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    flow: *const f32,
    seed: u64,
    out_class: *mut usize,
) -> VpStatus {
    guard(|| {
        let s = stack.as_ref().ok_or_else(|| null("stack"))?;
        let d = defense.as_ref().ok_or_else(|| null("defense"))?;
        let x = video_arg(video, frames, height, width, channels)?;
        let f = flow_arg(flow, frames, height, width)?;
        let r = d.purifier.predict(&x, f.as_ref(), &s.stack.classifier, seed)?;
        write_out(out_class, r.voted)
    })
}

/// PGD from a JSON attack spec (`{"kind":"gray_box"}`, `{"kind":"bpda"}`, ... with an optional
/// `"config"`). A null `defense` attacks the bare classifier. The result goes to `out_video`.
///
/// # Safety
/// As for `vp_defense_purify`.
#[no_mangle]
pub unsafe extern "C" fn vp_attack(
    stack: *const VpStack,
    defense: *const VpDefense,
    attack_json: *const c_char,
    video: *const f32,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    flow: *const f32,
    label: usize,
    out_video: *mut f32,
) -> VpStatus {
    guard(|| {
        let s = stack.as_ref().ok_or_else(|| null("stack"))?;
        let spec: AttackSpec = serde_json::from_str(str_arg(attack_json, "attack_json")?)
            .map_err(|e| Fail(VpStatus::Config, format!("bad attack spec: {e}")))?;
        spec.config.validate()?;
        let x = video_arg(video, frames, height, width, channels)?;
        let f = flow_arg(flow, frames, height, width)?;
        if out_video.is_null() {
            return Err(null("out_video"));
        }
        let clf = &s.stack.classifier;
        let gray = GrayBox { classifier: clf };
        let adaptive = |mode: BpdaMode| -> Result<Bpda<'_>, Fail> {
            let d = defense.as_ref().ok_or_else(|| null("defense"))?;
            Ok(Bpda { defense: d.purifier.as_ref(), classifier: clf, mode })
        };
        let adv = match spec.kind {
            AttackKind::Clean => x,
            AttackKind::GrayBox => pgd(&x, f.as_ref(), label, &gray, &spec.config)?,
            AttackKind::Bpda { mode } => pgd(&x, f.as_ref(), label, &adaptive(mode)?, &spec.config)?,
            AttackKind::EotBpda { mode } => {
                let inner = adaptive(mode)?;
                let eot = videopure::attack::Eot { inner: &inner as &dyn AttackTarget, reps: spec.config.eot_reps };
                pgd(&x, f.as_ref(), label, &eot, &spec.config)?
            }
        };
        ptr::copy_nonoverlapping(adv.data().as_ptr(), out_video, adv.data().len());
        Ok(())
    })
}

/// Loads a classifier checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vp_classifier_load(path: *const c_char, out: *mut *mut VpClassifier) -> VpStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        let model = VideoClassifier::load(&p)?;
        write_out(out, Box::into_raw(Box::new(VpClassifier { model })))
    })
}

/// # Safety
/// `clf` must come from `vp_classifier_load` and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn vp_classifier_free(clf: *mut VpClassifier) {
    if !clf.is_null() {
        drop(Box::from_raw(clf));
    }
}

/// Undefended prediction. `out_logits` may be null; otherwise it receives `logits_len`
/// values at most. `out_num_classes` (may be null) receives the class count.
///
/// # Safety
/// All non-null pointers must be valid for the given sizes.
#[no_mangle]
pub unsafe extern "C" fn vp_classifier_predict(
    clf: *const VpClassifier,
    video: *const f32,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    out_class: *mut usize,
    out_logits: *mut f32,
    logits_len: usize,
    out_num_classes: *mut usize,
) -> VpStatus {
    guard(|| {
        let c = clf.as_ref().ok_or_else(|| null("classifier"))?;
        let x = video_arg(video, frames, height, width, channels)?;
        let (logits, class) = classify(&c.model, &x)?;
        if !out_logits.is_null() {
            let n = logits.len().min(logits_len);
            ptr::copy_nonoverlapping(logits.as_ptr(), out_logits, n);
        }
        if !out_num_classes.is_null() {
            *out_num_classes = logits.len();
        }
        write_out(out_class, class)
    })
}
