//! C ABI over the canf engine.
//!
//! Every fallible function returns a [`CanfStatus`]; on failure the message
//! is available from [`canf_last_error`] on the same thread. Handles are
//! opaque and owned by the caller until passed to [`canf_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use canf::checkpoint;
use canf::config::{parse_config, RunConfig};
use canf::harness::generate_samples;
use canf::model::{build_model, count_parameters, Model};
use canf::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CanfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Shape = 3,
    Contract = 4,
    Range = 5,
    Config = 6,
    Numeric = 7,
    Format = 8,
    Version = 9,
    Integrity = 10,
    Correctness = 11,
    Io = 12,
    BufferSize = 13,
    Panic = 14,
}

impl From<&Error> for CanfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => CanfStatus::Shape,
            Error::Contract(_) => CanfStatus::Contract,
            Error::Range(_) => CanfStatus::Range,
            Error::Config { .. } => CanfStatus::Config,
            Error::Numeric(_) => CanfStatus::Numeric,
            Error::Format(_) => CanfStatus::Format,
            Error::Version { .. } => CanfStatus::Version,
            Error::Integrity(_) => CanfStatus::Integrity,
            Error::Correctness(_) => CanfStatus::Correctness,
            Error::Io(_) => CanfStatus::Io,
        }
    }
}

/// Opaque model handle: weights plus the run config they were built from.
pub struct CanfModel {
    config: RunConfig,
    model: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CanfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(CanfStatus::from(&e), e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CanfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CanfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CanfStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CanfStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CanfStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const CanfModel) -> Result<&'a CanfModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn write_out(out: *mut f32, out_len: usize, t: &Tensor<f32>) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    if out_len != t.numel() {
        return Err(Failure(
            CanfStatus::BufferSize,
            format!("output buffer holds {out_len} floats, result has {}", t.numel()),
        ));
    }
    // SAFETY: caller guarantees `out` points to `out_len` writable floats.
    unsafe { std::slice::from_raw_parts_mut(out, out_len) }.copy_from_slice(t.data());
    Ok(())
}

fn to_usize(v: &[u32]) -> Vec<usize> {
    v.iter().map(|&x| x as usize).collect()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn canf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Builds a freshly initialized model from `key = value` config text (null
/// for defaults).
///
/// # Safety
/// `config_text` must be null or a NUL-terminated string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn canf_model_new(config_text: *const c_char, seed: u64, out: *mut *mut CanfModel) -> CanfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = if config_text.is_null() {
            ""
        } else {
            str_arg(config_text, "config_text")?
        };
        let mut config = parse_config(text, &[])?;
        config.seed = seed;
        let model = build_model::<f32>(&config.model, seed)?;
        *out = Box::into_raw(Box::new(CanfModel { config, model }));
        Ok(())
    })
}

/// Loads a checkpoint archive.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn canf_model_load(path: *const c_char, out: *mut *mut CanfModel) -> CanfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let (config, model) = checkpoint::load(Path::new(path))?.into_model::<f32>(&[])?;
        *out = Box::into_raw(Box::new(CanfModel { config, model }));
        Ok(())
    })
}

/// Writes a checkpoint archive.
///
/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn canf_model_save(model: *const CanfModel, path: *const c_char) -> CanfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = str_arg(path, "path")?;
        checkpoint::save(&m.model, &m.config, Path::new(path))?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn canf_model_free(model: *mut CanfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total trainable parameter count.
///
/// # Safety
/// `model` must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn canf_model_param_count(model: *const CanfModel, out: *mut u64) -> CanfStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = count_parameters(&m.model).total as u64;
        Ok(())
    })
}

/// Image geometry and class count: inputs are `[batch, channels, size, size]`
/// and labels run over `0..n_classes` (`n_classes` is the null class).
///
/// # Safety
/// `model` must come from this library; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn canf_model_geometry(
    model: *const CanfModel,
    channels: *mut u32,
    size: *mut u32,
    n_classes: *mut u32,
) -> CanfStatus {
    guard(|| {
        let m = model_ref(model)?;
        if channels.is_null() || size.is_null() || n_classes.is_null() {
            return Err(null("geometry output"));
        }
        let c = &m.config.model;
        *channels = c.channels as u32;
        *size = c.image_size as u32;
        *n_classes = c.n_classes as u32;
        Ok(())
    })
}

/// Noise prediction for `x [batch, C, H, W]` at per-sample labels and
/// timesteps; writes `batch·C·H·W` floats to `out`.
///
/// # Safety
/// `x` must hold `batch·C·H·W` floats, `labels` and `timesteps` `batch`
/// values each, and `out` `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn canf_model_predict(
    model: *const CanfModel,
    x: *const f32,
    batch: usize,
    labels: *const u32,
    timesteps: *const u32,
    out: *mut f32,
    out_len: usize,
) -> CanfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let c = &m.config.model;
        let shape = [batch, c.channels, c.image_size, c.image_size];
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape.to_vec(), slice_arg(x, n, "x")?.to_vec())?;
        let labels = to_usize(slice_arg(labels, batch, "labels")?);
        let ts = to_usize(slice_arg(timesteps, batch, "timesteps")?);
        let y = m.model.predict(&x, &labels, &ts)?;
        write_out(out, out_len, &y)
    })
}

/// Guided DDIM samples, one per label; deterministic in `seed`.
///
/// # Safety
/// `labels` must hold `n` values and `out` `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn canf_model_sample(
    model: *const CanfModel,
    labels: *const u32,
    n: usize,
    steps: u32,
    guidance: f64,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> CanfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let labels = to_usize(slice_arg(labels, n, "labels")?);
        let s = generate_samples(&m.model, &m.config, &labels, steps as usize, guidance, seed)?;
        write_out(out, out_len, &s)
    })
}
