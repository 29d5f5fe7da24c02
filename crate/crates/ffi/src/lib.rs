//! C ABI over the flcleaner library.
//!
//! Every fallible call returns an [`FlcStatus`]. On failure the message is
//! kept per thread and can be read with [`flc_last_error`]. Models and CVAE
//! checkpoints cross the boundary as opaque handles that the caller releases
//! with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use flcleaner::cvae::CvaeState;
use flcleaner::defense::{aggregate_fedavg, trust_propagate, ClientScore};
use flcleaner::geomed::{geometric_median, GeoMedOptions, PointSet};
use flcleaner::harness::{run_to_dir, ExperimentConfig};
use flcleaner::nn::{init_model, ModelSpec, Shape, WeightVector};
use flcleaner::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Runtime = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Flat model parameters.
pub struct FlcWeights(WeightVector);

/// A trained CVAE checkpoint.
pub struct FlcCvae(CvaeState);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(FlcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            _ if e.is_config_error() => FlcStatus::Config,
            Error::Io { .. } | Error::BadMagic { .. } | Error::Truncated { .. } => FlcStatus::Io,
            Error::ShapeMismatch { .. } | Error::InvalidArgument(_) => FlcStatus::InvalidArgument,
            _ => FlcStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FlcStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(FlcStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FlcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlcStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside flcleaner".into());
            FlcStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn to_path(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn flc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Seeded weights of an `input -> hidden -> classes` MLP.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn flc_model_init_mlp(
    input: usize,
    hidden: usize,
    classes: usize,
    seed: u64,
    out: *mut *mut FlcWeights,
) -> FlcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let spec = ModelSpec::mlp(Shape::flat(input), hidden, classes, seed);
        *out = Box::into_raw(Box::new(FlcWeights(init_model(&spec)?)));
        Ok(())
    })
}

/// # Safety
/// `values` must point to `len` doubles and `out` to storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn flc_weights_from_values(values: *const f64, len: usize, out: *mut *mut FlcWeights) -> FlcStatus {
    guard(|| {
        let values = slice(values, len, "values")?;
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(FlcWeights(WeightVector::new(values.to_vec()))));
        Ok(())
    })
}

/// Parses the length-prefixed little-endian encoding.
///
/// # Safety
/// `bytes` must point to `len` bytes and `out` to storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn flc_weights_from_bytes(bytes: *const u8, len: usize, out: *mut *mut FlcWeights) -> FlcStatus {
    guard(|| {
        let bytes = slice(bytes, len, "bytes")?;
        let out = out_ptr(out, "out")?;
        let (w, used) = WeightVector::from_bytes(bytes)?;
        if used != len {
            return Err(invalid(format!("{} trailing bytes", len - used)));
        }
        *out = Box::into_raw(Box::new(FlcWeights(w)));
        Ok(())
    })
}

/// Number of parameters, or 0 for a null handle.
///
/// # Safety
/// `weights` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flc_weights_len(weights: *const FlcWeights) -> usize {
    weights.as_ref().map_or(0, |w| w.0.len())
}

/// Copies the parameters into `buf`, which must hold exactly `len` doubles.
///
/// # Safety
/// `weights` must be a live handle and `buf` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn flc_weights_get(weights: *const FlcWeights, buf: *mut f64, len: usize) -> FlcStatus {
    guard(|| {
        let w = weights.as_ref().ok_or_else(|| null("weights"))?;
        if len != w.0.len() {
            return Err(Failure(FlcStatus::BufferTooSmall, format!("buffer holds {len}, model has {}", w.0.len())));
        }
        slice_mut(buf, len, "buf")?.copy_from_slice(w.0.as_slice());
        Ok(())
    })
}

/// Writes the byte encoding into `buf` and its size into `written`. With a
/// null `buf` only the required size is reported.
///
/// # Safety
/// `weights` must be a live handle, `buf` null or `cap` writable bytes, and
/// `written` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn flc_weights_to_bytes(
    weights: *const FlcWeights,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> FlcStatus {
    guard(|| {
        let w = weights.as_ref().ok_or_else(|| null("weights"))?;
        let written = out_ptr(written, "written")?;
        let bytes = w.0.to_bytes();
        *written = bytes.len();
        if buf.is_null() {
            return Ok(());
        }
        if cap < bytes.len() {
            return Err(Failure(FlcStatus::BufferTooSmall, format!("need {} bytes, have {cap}", bytes.len())));
        }
        slice_mut(buf, bytes.len(), "buf")?.copy_from_slice(&bytes);
        Ok(())
    })
}

/// # Safety
/// `weights` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn flc_weights_free(weights: *mut FlcWeights) {
    if !weights.is_null() {
        drop(Box::from_raw(weights));
    }
}

/// Filters `n` clients by reconstruction error. Client `i` has score
/// `eps[i]`; `benign_out[i]` is set to 1 when accepted and 0 when blocked.
///
/// # Safety
/// `eps` and `benign_out` must point to `n` elements; `delta_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn flc_trust_propagate(
    eps: *const f64,
    n: usize,
    lambda: f64,
    benign_out: *mut u8,
    delta_out: *mut f64,
) -> FlcStatus {
    guard(|| {
        let eps = slice(eps, n, "eps")?;
        let benign = slice_mut(benign_out, n, "benign_out")?;
        let scores: Vec<ClientScore> = eps.iter().enumerate().map(|(i, &e)| ClientScore::new(i, e)).collect();
        let decision = trust_propagate(&scores, lambda)?;
        benign.fill(0);
        for &id in &decision.benign_ids {
            benign[id] = 1;
        }
        if let Some(d) = delta_out.as_mut() {
            *d = decision.delta;
        }
        Ok(())
    })
}

/// Geometric median of `n` row-major points of dimension `dim`, written to
/// `out` (`dim` doubles). Returns the iteration count through `iterations`
/// when it is not null.
///
/// # Safety
/// `points` must hold `n * dim` doubles and `out` `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn flc_geometric_median(
    points: *const f64,
    n: usize,
    dim: usize,
    tol: f64,
    max_iters: usize,
    out: *mut f64,
    iterations: *mut usize,
) -> FlcStatus {
    guard(|| {
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        let total = n.checked_mul(dim).ok_or_else(|| invalid("n * dim overflows"))?;
        let flat = slice(points, total, "points")?;
        let out = slice_mut(out, dim, "out")?;
        let ps = PointSet::new(flat.chunks_exact(dim))?;
        let r = geometric_median(&ps, &GeoMedOptions { tol, max_iters });
        out.copy_from_slice(&r.median);
        if let Some(it) = iterations.as_mut() {
            *it = r.iterations;
        }
        Ok(())
    })
}

/// Dataset-size weighted average of `n` models.
///
/// # Safety
/// `models` must hold `n` live handles, `sizes` `n` counts, and `out` must be
/// valid storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn flc_fedavg(
    models: *const *const FlcWeights,
    sizes: *const usize,
    n: usize,
    out: *mut *mut FlcWeights,
) -> FlcStatus {
    guard(|| {
        let handles = slice(models, n, "models")?;
        let sizes = slice(sizes, n, "sizes")?;
        let out = out_ptr(out, "out")?;
        let models = handles
            .iter()
            .map(|&h| h.as_ref().map(|w| &w.0).ok_or_else(|| null("model handle")))
            .collect::<Result<Vec<_>, _>>()?;
        *out = Box::into_raw(Box::new(FlcWeights(aggregate_fedavg(&models, sizes)?)));
        Ok(())
    })
}

/// Loads a CVAE checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` valid storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn flc_cvae_load(path: *const c_char, out: *mut *mut FlcCvae) -> FlcStatus {
    guard(|| {
        let p = to_path(path, "path")?;
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(FlcCvae(CvaeState::load(p)?)));
        Ok(())
    })
}

/// Length of the activation vectors the CVAE accepts, or 0 for null.
///
/// # Safety
/// `cvae` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flc_cvae_input_dim(cvae: *const FlcCvae) -> usize {
    cvae.as_ref().map_or(0, |c| c.0.dims.input_dim)
}

/// Deterministic reconstruction error of one normalized activation map.
///
/// # Safety
/// `cvae` must be a live handle, `nam` must hold `len` doubles and `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn flc_cvae_reconstruction_error(
    cvae: *const FlcCvae,
    nam: *const f64,
    len: usize,
    label: usize,
    out: *mut f64,
) -> FlcStatus {
    guard(|| {
        let c = cvae.as_ref().ok_or_else(|| null("cvae"))?;
        let nam = slice(nam, len, "nam")?;
        let out = out_ptr(out, "out")?;
        *out = flcleaner::cvae::reconstruction_error(&c.0, nam, label)?;
        Ok(())
    })
}

/// # Safety
/// `cvae` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn flc_cvae_free(cvae: *mut FlcCvae) {
    if !cvae.is_null() {
        drop(Box::from_raw(cvae));
    }
}

/// Runs the experiment described by a config file and writes its reports.
///
/// # Safety
/// Both arguments must be nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn flc_run_experiment(config_path: *const c_char, out_dir: *const c_char) -> FlcStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(to_path(config_path, "config_path")?)?;
        cfg.validate()?;
        run_to_dir(&cfg, &to_path(out_dir, "out_dir")?)?;
        Ok(())
    })
}
