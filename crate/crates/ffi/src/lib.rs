//! C interface. Every function returns a [`DsmoeStatus`]; on failure the
//! message is available from [`dsmoe_last_error`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dsmoe::config::{preset, resolve_config, ModelConfig};
use dsmoe::flow::{sample, SamplerConfig, Solver};
use dsmoe::model::DiTMoE;
use dsmoe::train::checkpoint::load_checkpoint;
use dsmoe::train::Trainer;
use dsmoe::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsmoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Io = 4,
    CorruptCheckpoint = 5,
    NonFinite = 6,
    Runtime = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsmoeSolver {
    Euler = 0,
    Heun = 1,
}

/// Opaque model configuration.
pub struct DsmoeConfig(ModelConfig);

/// Opaque model with its routing state.
pub struct DsmoeModel(DiTMoE);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DsmoeStatus {
    match e {
        Error::Config(_) | Error::ExpertSpec { .. } | Error::ConfigParse { .. } | Error::Rotary(_) => {
            DsmoeStatus::InvalidConfig
        }
        Error::Io { .. } => DsmoeStatus::Io,
        Error::CorruptCheckpoint(_) | Error::CheckpointVersion { .. } | Error::KeyMismatch { .. } => {
            DsmoeStatus::CorruptCheckpoint
        }
        Error::NonFinite(_) => DsmoeStatus::NonFinite,
        Error::Shape { .. } | Error::InvalidShape(_) | Error::Index { .. } | Error::Sampler(_) => {
            DsmoeStatus::InvalidArgument
        }
        _ => DsmoeStatus::Runtime,
    }
}

struct Fail(DsmoeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DsmoeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DsmoeStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DsmoeStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DsmoeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DsmoeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return if len == 0 { Ok(&[]) } else { Err(null(what)) };
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dsmoe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dsmoe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Looks up a built-in preset by name, e.g. `"dsmoe-s-e16"`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsmoe_config_preset(name: *const c_char, out: *mut *mut DsmoeConfig) -> DsmoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = preset(str_arg(name, "name")?)?;
        *out = Box::into_raw(Box::new(DsmoeConfig(cfg)));
        Ok(())
    })
}

/// Loads a TOML config file (or falls back to a preset of the same stem).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsmoe_config_load(path: *const c_char, out: *mut *mut DsmoeConfig) -> DsmoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = resolve_config(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(DsmoeConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn dsmoe_config_free(config: *mut DsmoeConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Returns `DSMOE_STATUS_INVALID_CONFIG` with the full violation list as
/// the error message when the config breaks a constraint.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dsmoe_config_validate(config: *const DsmoeConfig) -> DsmoeStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        let report = cfg.0.validate();
        if report.is_ok() {
            Ok(())
        } else {
            Err(Fail(DsmoeStatus::InvalidConfig, report.to_string()))
        }
    })
}

/// # Safety
/// `config` must be a live handle; `total` and `activated` writable.
#[no_mangle]
pub unsafe extern "C" fn dsmoe_config_count_params(
    config: *const DsmoeConfig,
    total: *mut u64,
    activated: *mut u64,
) -> DsmoeStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if total.is_null() || activated.is_null() {
            return Err(null("output pointer"));
        }
        let c = cfg.0.count_parameters()?;
        *total = c.total;
        *activated = c.activated;
        Ok(())
    })
}

/// Freshly initialized model.
///
/// # Safety
/// `config` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dsmoe_model_new(
    config: *const DsmoeConfig,
    seed: u64,
    out: *mut *mut DsmoeModel,
) -> DsmoeStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = DiTMoE::new(cfg.0.clone(), seed)?;
        *out = Box::into_raw(Box::new(DsmoeModel(m)));
        Ok(())
    })
}

/// Model from a checkpoint; `use_ema` selects the EMA weights.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dsmoe_model_load(
    path: *const c_char,
    use_ema: bool,
    out: *mut *mut DsmoeModel,
) -> DsmoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bundle = load_checkpoint(Path::new(str_arg(path, "path")?))?;
        let t = Trainer::from_bundle(&bundle)?;
        let m = if use_ema { t.ema_model()? } else { t.model };
        *out = Box::into_raw(Box::new(DsmoeModel(m)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn dsmoe_model_free(model: *mut DsmoeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image shape `[channels, height, width]` and the null class label.
///
/// # Safety
/// `model` must be a live handle; all outputs writable.
#[no_mangle]
pub unsafe extern "C" fn dsmoe_model_image_shape(
    model: *const DsmoeModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    null_class: *mut usize,
) -> DsmoeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if channels.is_null() || height.is_null() || width.is_null() || null_class.is_null() {
            return Err(null("output pointer"));
        }
        let c = m.0.config();
        let (h, w) = c.image_size();
        *channels = c.in_channels;
        *height = h;
        *width = w;
        *null_class = c.num_classes;
        Ok(())
    })
}

fn image_numel(m: &DiTMoE) -> usize {
    let c = m.config();
    let (h, w) = c.image_size();
    c.in_channels * h * w
}

fn check_out_len(expected: usize, got: usize) -> Result<(), Fail> {
    if expected == got {
        Ok(())
    } else {
        Err(Fail(
            DsmoeStatus::InvalidArgument,
            format!("output buffer holds {got} values, need {expected}"),
        ))
    }
}

/// Velocity prediction for `batch` images `x` (`[B×C×H×W]`, row-major) at
/// per-image times `t` with labels `classes`. Writes `B·C·H·W` values.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn dsmoe_model_forward(
    model: *mut DsmoeModel,
    x: *const f64,
    batch: usize,
    t: *const f64,
    classes: *const usize,
    out: *mut f64,
    out_len: usize,
) -> DsmoeStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let per = image_numel(&m.0);
        check_out_len(batch * per, out_len)?;
        let x = slice_arg(x, batch * per, "x")?;
        let t = slice_arg(t, batch, "t")?;
        let classes = slice_arg(classes, batch, "classes")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let c = m.0.config();
        let (h, w) = c.image_size();
        let xt = Tensor::new([batch, c.in_channels, h, w], x.to_vec())?;
        let pred = m.0.forward(&xt, t, classes)?.prediction;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(pred.data());
        Ok(())
    })
}

/// Generates one image per label, integrating from seeded Gaussian noise.
/// `cfg_lo`/`cfg_hi` bound the guidance interval; pass a negative `cfg_lo`
/// to guide at every step.
///
/// # Safety
/// `classes` holds `batch` labels; `out` holds `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn dsmoe_model_sample(
    model: *mut DsmoeModel,
    classes: *const usize,
    batch: usize,
    solver: DsmoeSolver,
    steps: usize,
    cfg_scale: f64,
    cfg_lo: f64,
    cfg_hi: f64,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> DsmoeStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let per = image_numel(&m.0);
        check_out_len(batch * per, out_len)?;
        let classes = slice_arg(classes, batch, "classes")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = SamplerConfig {
            solver: match solver {
                DsmoeSolver::Euler => Solver::Euler,
                DsmoeSolver::Heun => Solver::Heun,
            },
            steps,
            cfg_scale,
            cfg_interval: (cfg_lo >= 0.0).then_some((cfg_lo, cfg_hi)),
            ..SamplerConfig::default()
        };
        let c = m.0.config();
        let (h, w) = c.image_size();
        let shape = [c.in_channels, h, w];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = sample(&mut m.0, classes, &shape, &cfg, &mut rng)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(x.data());
        Ok(())
    })
}
