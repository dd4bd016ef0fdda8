//! C ABI over the `multifuser` crate.
//!
//! Models and datasets are opaque handles created and released by this
//! library. Every fallible call returns an [`MfStatus`]; on failure the message
//! is available from [`mf_last_error`] on the same thread until the next call.
//! Configuration is passed as flat `key = value` text (NULL for defaults).

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use libc::{c_char, size_t};
use multifuser::checkpoint::{load_checkpoint, save_checkpoint};
use multifuser::config::RunConfig;
use multifuser::data::{ClipDims, SyntheticClip};
use multifuser::experiment::splits;
use multifuser::model::MultiFuser;
use multifuser::train::{evaluate, train_with, AdamState};
use multifuser::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Dimension = 3,
    Numeric = 4,
    Contract = 5,
    Load = 6,
    Diverged = 7,
    Io = 8,
    InvalidUtf8 = 9,
    Panic = 10,
}

/// A model with its optimizer state.
pub struct MfModel {
    model: MultiFuser,
    optimizer: AdamState,
}

pub struct MfDataset {
    clips: Vec<SyntheticClip>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MfStatus {
    match e {
        Error::Dimension(_) => MfStatus::Dimension,
        Error::Config(_) => MfStatus::Config,
        Error::Numeric(_) => MfStatus::Numeric,
        Error::Contract(_) => MfStatus::Contract,
        Error::Load { .. } => MfStatus::Load,
        Error::Diverged(_) => MfStatus::Diverged,
        Error::Io(_) => MfStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Utf8,
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MfStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MfStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            MfStatus::NullPointer
        }
        Ok(Err(Fail::Utf8)) => {
            set_error("string argument is not valid UTF-8");
            MfStatus::InvalidUtf8
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            MfStatus::Panic
        }
    }
}

unsafe fn text<'a>(s: *const c_char) -> Result<Option<&'a str>, Fail> {
    if s.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(s).to_str().map(Some).map_err(|_| Fail::Utf8)
}

unsafe fn run_config(config: *const c_char) -> Result<RunConfig, Fail> {
    let mut run = RunConfig::default();
    if let Some(t) = text(config)? {
        run.apply_text(t)?;
    }
    run.validate()?;
    Ok(run)
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Fail> {
    text(p)?.map(PathBuf::from).ok_or(Fail::Null("path"))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn mf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a freshly initialized model.
///
/// # Safety
/// `config` is NULL or a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_model_new(config: *const c_char, out: *mut *mut MfModel) -> MfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let run = run_config(config)?;
        let model = MultiFuser::new(run.model)?;
        let optimizer = AdamState::new(model.store());
        *out = Box::into_raw(Box::new(MfModel { model, optimizer }));
        Ok(())
    })
}

/// # Safety
/// `model` is NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mf_model_free(model: *mut MfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters.
///
/// # Safety
/// `model` is a live handle; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_model_param_count(model: *const MfModel, out: *mut size_t) -> MfStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(model, "model")?.model.census();
        Ok(())
    })
}

/// Number of output classes.
///
/// # Safety
/// `model` is a live handle; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_model_num_classes(model: *const MfModel, out: *mut size_t) -> MfStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(model, "model")?.model.config().classes;
        Ok(())
    })
}

/// Scalars per clip, `M·T·H·W·C`.
///
/// # Safety
/// `model` is a live handle; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_model_clip_len(model: *const MfModel, out: *mut size_t) -> MfStatus {
    guard(|| {
        *out_ptr(out, "out")? = ClipDims::of_model(handle(model, "model")?.model.config()).numel();
        Ok(())
    })
}

fn write_logits(logits: &[f64], out: *mut f64, len: size_t) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("logits"));
    }
    if len != logits.len() {
        return Err(Error::Dimension(format!("logits buffer holds {len}, model emits {}", logits.len())).into());
    }
    // SAFETY: the caller guarantees `out` holds `len` writable doubles.
    unsafe { ptr::copy_nonoverlapping(logits.as_ptr(), out, len) };
    Ok(())
}

/// Logits for one clip of row-major `[M, T, H, W, C]` pixels.
///
/// # Safety
/// `pixels` holds `pixels_len` doubles and `logits` holds `logits_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mf_model_forward(
    model: *const MfModel,
    pixels: *const f64,
    pixels_len: size_t,
    logits: *mut f64,
    logits_len: size_t,
) -> MfStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        if pixels.is_null() {
            return Err(Fail::Null("pixels"));
        }
        let dims = ClipDims::of_model(m.config());
        if pixels_len != dims.numel() {
            return Err(Error::Dimension(format!("clip has {pixels_len} scalars, model expects {}", dims.numel())).into());
        }
        let clip = SyntheticClip {
            dims,
            pixels: std::slice::from_raw_parts(pixels, pixels_len).to_vec(),
            label: 0,
            bit_assignment: vec![0; dims.modalities],
        };
        write_logits(&m.logits(&clip)?, logits, logits_len)
    })
}

/// Logits for clip `index` of a dataset.
///
/// # Safety
/// Handles are live; `logits` holds `logits_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mf_model_logits(
    model: *const MfModel,
    dataset: *const MfDataset,
    index: size_t,
    logits: *mut f64,
    logits_len: size_t,
) -> MfStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        let clip = handle(dataset, "dataset")?
            .clips
            .get(index)
            .ok_or_else(|| Error::Contract(format!("clip index {index} out of range")))?;
        write_logits(&m.logits(clip)?, logits, logits_len)
    })
}

/// Trains until `train.epochs` epochs have run in total (so a loaded
/// checkpoint resumes). Writes the last epoch's mean loss to `final_loss`
/// when it is not NULL; it is left untouched if no epoch ran.
///
/// # Safety
/// Handles are live; `config` is NULL or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mf_model_train(
    model: *mut MfModel,
    dataset: *const MfDataset,
    config: *const c_char,
    final_loss: *mut f64,
) -> MfStatus {
    guard(|| {
        let h = model.as_mut().ok_or(Fail::Null("model"))?;
        let data = &handle(dataset, "dataset")?.clips;
        let run = run_config(config)?;
        let report = train_with(&mut h.model, &mut h.optimizer, data, &run.train, |_| {})?;
        if let (Some(out), Some(last)) = (final_loss.as_mut(), report.epochs.last()) {
            *out = last.loss;
        }
        Ok(())
    })
}

/// Top-1 and Mean-1 accuracy on a dataset.
///
/// # Safety
/// Handles are live; `top1` and `mean1` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mf_model_evaluate(
    model: *const MfModel,
    dataset: *const MfDataset,
    top1: *mut f64,
    mean1: *mut f64,
) -> MfStatus {
    guard(|| {
        let e = evaluate(&handle(model, "model")?.model, &handle(dataset, "dataset")?.clips)?;
        *out_ptr(top1, "top1")? = e.top1;
        *out_ptr(mean1, "mean1")? = e.mean1;
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mf_model_save(model: *const MfModel, path: *const c_char) -> MfStatus {
    guard(|| {
        let h = handle(model, "model")?;
        save_checkpoint(&self::path(path)?, &h.model, &h.optimizer)?;
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_model_load(path: *const c_char, out: *mut *mut MfModel) -> MfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (model, optimizer) = load_checkpoint(&self::path(path)?)?;
        *out = Box::into_raw(Box::new(MfModel { model, optimizer }));
        Ok(())
    })
}

/// Generates the train and eval splits described by `config`.
///
/// # Safety
/// `config` is NULL or a NUL-terminated string; both outputs are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mf_dataset_generate(
    config: *const c_char,
    train: *mut *mut MfDataset,
    eval: *mut *mut MfDataset,
) -> MfStatus {
    guard(|| {
        let train = out_ptr(train, "train")?;
        let eval = out_ptr(eval, "eval")?;
        let s = splits(&run_config(config)?)?;
        *train = Box::into_raw(Box::new(MfDataset { clips: s.train }));
        *eval = Box::into_raw(Box::new(MfDataset { clips: s.eval }));
        Ok(())
    })
}

/// # Safety
/// `dataset` is NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mf_dataset_free(dataset: *mut MfDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` is a live handle; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_dataset_len(dataset: *const MfDataset, out: *mut size_t) -> MfStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(dataset, "dataset")?.clips.len();
        Ok(())
    })
}

/// # Safety
/// `dataset` is a live handle; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_dataset_label(dataset: *const MfDataset, index: size_t, out: *mut size_t) -> MfStatus {
    guard(|| {
        let clip = handle(dataset, "dataset")?
            .clips
            .get(index)
            .ok_or_else(|| Error::Contract(format!("clip index {index} out of range")))?;
        *out_ptr(out, "out")? = clip.label;
        Ok(())
    })
}

/// Copies the pixels of clip `index` into `pixels` (`len` doubles).
///
/// # Safety
/// `dataset` is a live handle; `pixels` holds `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mf_dataset_pixels(
    dataset: *const MfDataset,
    index: size_t,
    pixels: *mut f64,
    len: size_t,
) -> MfStatus {
    guard(|| {
        let clip = handle(dataset, "dataset")?
            .clips
            .get(index)
            .ok_or_else(|| Error::Contract(format!("clip index {index} out of range")))?;
        if pixels.is_null() {
            return Err(Fail::Null("pixels"));
        }
        if len != clip.pixels.len() {
            return Err(Error::Dimension(format!("buffer holds {len}, clip has {}", clip.pixels.len())).into());
        }
        ptr::copy_nonoverlapping(clip.pixels.as_ptr(), pixels, len);
        Ok(())
    })
}
