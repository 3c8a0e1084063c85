//! C ABI over `entmerge`: load a frozen expert pool, run the online
//! entropy-adaptive engine batch by batch, and call the coefficient and
//! geometry helpers.
//!
//! Every entry point returns an [`EmStatus`]. On failure the message is kept
//! per thread and read with [`em_last_error`]. Handles are opaque and must be
//! released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use entmerge::data::Batch;
use entmerge::diagnostics::signal_loss;
use entmerge::harness::checkpoint::load_pool;
use entmerge::merging::{head_coefficients, inverse_entropy_coefficients, EngineConfig, EngineState};
use entmerge::training::ExpertPool;
use entmerge::{Error, Tensor};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Data = 4,
    Config = 5,
    Training = 6,
    Format = 7,
    Io = 8,
    Panic = 9,
}

/// Frozen expert pool.
pub struct EmPool {
    inner: Arc<ExpertPool>,
}

/// Online merging state bound to one pool.
pub struct EmEngine {
    inner: EngineState,
}

/// Engine hyperparameters. Obtain defaults from [`em_engine_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EmEngineConfig {
    pub epsilon: f64,
    pub tau_ent: f64,
    pub tau_head: f64,
    pub ema_rate: f64,
    pub views: usize,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> EmStatus {
    match e.category() {
        "shape" => EmStatus::Shape,
        "data" => EmStatus::Data,
        "config" => EmStatus::Config,
        "training" => EmStatus::Training,
        "format" => EmStatus::Format,
        "io" => EmStatus::Io,
        _ => EmStatus::InvalidArgument,
    }
}

struct Fail(EmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(EmStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            EmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            EmStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize) -> Option<&'a mut [T]> {
    (!ptr.is_null()).then(|| std::slice::from_raw_parts_mut(ptr, len))
}

/// Message of the last failed call on this thread, empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn em_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a pool checkpoint written by `entmerge train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn em_pool_load(path: *const c_char, out: *mut *mut EmPool) -> EmStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p =
            CStr::from_ptr(path).to_str().map_err(|_| Fail(EmStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let pool = load_pool(Path::new(p))?;
        *out = Box::into_raw(Box::new(EmPool { inner: Arc::new(pool) }));
        Ok(())
    })
}

/// Releases a pool. Engines created from it stay valid.
///
/// # Safety
/// `pool` must come from [`em_pool_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn em_pool_free(pool: *mut EmPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

/// Writes the number of experts, the input width and the class count.
/// Any of the output pointers may be null.
///
/// # Safety
/// `pool` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn em_pool_info(
    pool: *const EmPool,
    num_experts: *mut usize,
    input_dim: *mut usize,
    num_classes: *mut usize,
) -> EmStatus {
    guard(|| {
        let pool = pool.as_ref().ok_or_else(|| null("pool"))?;
        let meta = pool.inner.shared_init.meta();
        if let Some(n) = num_experts.as_mut() {
            *n = pool.inner.len();
        }
        if let Some(d) = input_dim.as_mut() {
            *d = meta.input_dim;
        }
        if let Some(c) = num_classes.as_mut() {
            *c = meta.class_count;
        }
        Ok(())
    })
}

/// Default engine hyperparameters.
#[no_mangle]
pub extern "C" fn em_engine_config_default() -> EmEngineConfig {
    let d = EngineConfig::default();
    EmEngineConfig {
        epsilon: d.epsilon,
        tau_ent: d.tau_ent,
        tau_head: d.tau_head,
        ema_rate: d.ema_rate,
        views: d.views,
        seed: d.seed,
    }
}

/// Starts a stream over `pool`. A null `config` means the defaults.
///
/// # Safety
/// `pool` must be a live handle, `config` null or valid, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn em_engine_new(
    pool: *const EmPool,
    config: *const EmEngineConfig,
    out: *mut *mut EmEngine,
) -> EmStatus {
    guard(|| {
        let pool = pool.as_ref().ok_or_else(|| null("pool"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = EngineConfig::default();
        if let Some(c) = config.as_ref() {
            cfg.epsilon = c.epsilon;
            cfg.tau_ent = c.tau_ent;
            cfg.tau_head = c.tau_head;
            cfg.ema_rate = c.ema_rate;
            cfg.views = c.views;
            cfg.seed = c.seed;
        }
        let engine = EngineState::new(Arc::clone(&pool.inner), cfg)?;
        *out = Box::into_raw(Box::new(EmEngine { inner: engine }));
        Ok(())
    })
}

/// Releases an engine.
///
/// # Safety
/// `engine` must come from [`em_engine_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn em_engine_free(engine: *mut EmEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Merges the pool for one row-major `rows x cols` batch and predicts it.
///
/// Outputs are optional: `predicted` holds `rows` class indices,
/// `probabilities` holds `rows x classes` values, `alpha_encoder` and
/// `alpha_head` hold one coefficient per expert.
///
/// # Safety
/// `features` must point to `rows * cols` floats; every non-null output
/// must have room for the sizes above.
#[no_mangle]
pub unsafe extern "C" fn em_engine_step(
    engine: *mut EmEngine,
    features: *const f32,
    rows: usize,
    cols: usize,
    predicted: *mut usize,
    probabilities: *mut f32,
    alpha_encoder: *mut f64,
    alpha_head: *mut f64,
) -> EmStatus {
    guard(|| {
        let engine = engine.as_mut().ok_or_else(|| null("engine"))?;
        let n = rows.checked_mul(cols).ok_or_else(|| Fail(EmStatus::Shape, "rows * cols overflows".into()))?;
        let x = slice(features, n, "features")?;
        let batch = Batch::new(Tensor::matrix(rows, cols, x.to_vec())?)?;
        let step = engine.inner.merge_step(&batch)?;
        let k = step.coefficients.encoder.len();
        if let Some(out) = slice_mut(predicted, rows) {
            out.copy_from_slice(&step.prediction.predicted_class);
        }
        let p = step.prediction.probabilities.data();
        if let Some(out) = slice_mut(probabilities, p.len()) {
            out.copy_from_slice(p);
        }
        if let Some(out) = slice_mut(alpha_encoder, k) {
            out.copy_from_slice(&step.coefficients.encoder);
        }
        if let Some(out) = slice_mut(alpha_head, k) {
            out.copy_from_slice(&step.coefficients.head);
        }
        Ok(())
    })
}

/// Number of batches processed so far.
///
/// # Safety
/// `engine` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn em_engine_steps(engine: *const EmEngine, out: *mut usize) -> EmStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = engine.inner.steps();
        Ok(())
    })
}

/// Normalized inverse-entropy weights for `k` scores.
///
/// # Safety
/// `scores` and `out` must each hold `k` doubles.
#[no_mangle]
pub unsafe extern "C" fn em_inverse_entropy_coefficients(
    scores: *const f64,
    k: usize,
    epsilon: f64,
    out: *mut f64,
) -> EmStatus {
    guard(|| {
        let s = slice(scores, k, "scores")?;
        let out = slice_mut(out, k).ok_or_else(|| null("out"))?;
        out.copy_from_slice(&inverse_entropy_coefficients(s, epsilon)?);
        Ok(())
    })
}

/// Head weights from entropy gaps to the selected expert `k_star`.
///
/// # Safety
/// `scores` and `out` must each hold `k` doubles.
#[no_mangle]
pub unsafe extern "C" fn em_head_coefficients(
    scores: *const f64,
    k: usize,
    k_star: usize,
    tau_head: f64,
    out: *mut f64,
) -> EmStatus {
    guard(|| {
        let s = slice(scores, k, "scores")?;
        let out = slice_mut(out, k).ok_or_else(|| null("out"))?;
        out.copy_from_slice(&head_coefficients(s, k_star, tau_head)?);
        Ok(())
    })
}

/// Percent of norm lost by averaging two equal-norm vectors `angle_deg` apart.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn em_signal_loss(angle_deg: f64, out: *mut f64) -> EmStatus {
    guard(|| {
        *out.as_mut().ok_or_else(|| null("out"))? = signal_loss(angle_deg)?;
        Ok(())
    })
}
