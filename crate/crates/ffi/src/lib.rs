//! C ABI over the `mmadapt` core.
//!
//! Every function returns an [`ArcStatus`]. On failure the message is
//! available from [`arc_last_error`] until the next call on the same thread.
//! Models are opaque handles created by [`arc_model_new`] and released with
//! [`arc_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mmadapt::config::ExperimentConfig;
use mmadapt::experiment::{self, RunOptions};
use mmadapt::model::Model;
use mmadapt::Error;

/// Status codes. The non-zero values for configuration, numeric and I/O
/// failures match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArcStatus {
    Ok = 0,
    Failed = 1,
    Config = 2,
    Numeric = 3,
    Io = 4,
    NullArgument = 5,
    InvalidUtf8 = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct ArcModel {
    model: Model,
    config: ExperimentConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ArcStatus {
    match e.exit_code() {
        2 => ArcStatus::Config,
        3 => ArcStatus::Numeric,
        4 => ArcStatus::Io,
        _ => ArcStatus::Failed,
    }
}

enum Fail {
    Core(Error),
    Null(&'static str),
    Utf8(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ArcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ArcStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(arg))) => {
            set_error(format!("`{arg}` is null"));
            ArcStatus::NullArgument
        }
        Ok(Err(Fail::Utf8(arg))) => {
            set_error(format!("`{arg}` is not valid UTF-8"));
            ArcStatus::InvalidUtf8
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            ArcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(name))
}

/// A null or empty string selects the default configuration.
unsafe fn config_arg(p: *const c_char) -> Result<ExperimentConfig, Fail> {
    if p.is_null() {
        return Ok(ExperimentConfig::default());
    }
    let text = str_arg(p, "config_json")?;
    if text.trim().is_empty() {
        return Ok(ExperimentConfig::default());
    }
    Ok(ExperimentConfig::from_json(text)?)
}

unsafe fn model_arg<'a>(p: *const ArcModel) -> Result<&'a ArcModel, Fail> {
    p.as_ref().ok_or(Fail::Null("model"))
}

fn out_arg<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Fail> {
    unsafe { p.as_mut() }.ok_or(Fail::Null(name))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn arc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a freshly initialised model from a JSON configuration (null or
/// empty for the defaults) and stores the handle in `*out`.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn arc_model_new(config_json: *const c_char, out: *mut *mut ArcModel) -> ArcStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        *slot = ptr::null_mut();
        let config = config_arg(config_json)?;
        let model = Model::build(&config.model, &config.vision, config.seed)?;
        *slot = Box::into_raw(Box::new(ArcModel { model, config }));
        Ok(())
    })
}

/// Releases a handle from [`arc_model_new`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn arc_model_free(model: *mut ArcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trainable and frozen element counts.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn arc_model_param_counts(
    model: *const ArcModel,
    trainable: *mut u64,
    frozen: *mut u64,
) -> ArcStatus {
    guard(|| {
        let m = model_arg(model)?;
        let (t, f) = m.model.param_counts();
        *out_arg(trainable, "trainable")? = t as u64;
        *out_arg(frozen, "frozen")? = f as u64;
        Ok(())
    })
}

/// Number of visual tokens the decoder receives per image.
///
/// # Safety
/// `model` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn arc_model_visual_tokens(model: *const ArcModel, out: *mut u64) -> ArcStatus {
    guard(|| {
        let m = model_arg(model)?;
        *out_arg(out, "out")? = m.model.tower.n_visual_tokens() as u64;
        Ok(())
    })
}

/// Writes the model's parameters as a checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn arc_model_save(model: *const ArcModel, path: *const c_char) -> ArcStatus {
    guard(|| {
        let m = model_arg(model)?;
        let p = PathBuf::from(str_arg(path, "path")?);
        mmadapt::checkpoint::save(&m.model.store, &p)?;
        Ok(())
    })
}

/// Restores parameters from a checkpoint written for the same configuration.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn arc_model_load(model: *mut ArcModel, path: *const c_char) -> ArcStatus {
    guard(|| {
        let m = model.as_mut().ok_or(Fail::Null("model"))?;
        let p = PathBuf::from(str_arg(path, "path")?);
        mmadapt::checkpoint::load(&mut m.model.store, &p)?;
        Ok(())
    })
}

/// Trains according to the handle's configuration, replacing its weights, and
/// reports held-out accuracy (NaN when no fine-tune stage ran). Results are
/// written to the configured output directory.
///
/// # Safety
/// `model` must be a live handle; `accuracy` must be valid.
#[no_mangle]
pub unsafe extern "C" fn arc_model_train(model: *mut ArcModel, accuracy: *mut f64) -> ArcStatus {
    guard(|| {
        let m = model.as_mut().ok_or(Fail::Null("model"))?;
        let acc = out_arg(accuracy, "accuracy")?;
        let out = m.config.output.directory.clone();
        let (trained, res) = experiment::train_model(&m.config, Some(&out), &RunOptions::default())?;
        m.model = trained;
        *acc = res.eval.map_or(f64::NAN, |e| e.accuracy);
        Ok(())
    })
}

/// Finite-difference audit of the configuration's trainable groups (null or
/// empty config for the tiny model). Returns `Numeric` when it fails.
///
/// # Safety
/// `config_json` must be null or NUL-terminated; `max_rel_err` must be valid.
#[no_mangle]
pub unsafe extern "C" fn arc_grad_check(config_json: *const c_char, max_rel_err: *mut f64) -> ArcStatus {
    guard(|| {
        let out = out_arg(max_rel_err, "max_rel_err")?;
        let blank = config_json.is_null() || str_arg(config_json, "config_json")?.trim().is_empty();
        let cfg = if blank { ExperimentConfig::tiny() } else { config_arg(config_json)? };
        let r = experiment::grad_check(&cfg, None)?;
        *out = r.max_rel_err;
        if !r.passed {
            return Err(Error::Numeric(format!(
                "gradient check failed for {}",
                r.failing_params().join(", ")
            ))
            .into());
        }
        Ok(())
    })
}
