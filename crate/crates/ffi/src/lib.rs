//! C ABI over `normshape`.
//!
//! Objects are opaque handles created by `*_load`, `*_new` or `*_fit`
//! functions and released with the matching `*_free`. Every fallible call
//! returns an `NsStatus`; on failure `ns_last_error` holds a message for the
//! calling thread until the next failing call.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use normshape::detect::{self, CohortStats};
use normshape::vae::VaeParams;
use normshape::volume::{self, MaskVolume};
use normshape::{eval, Error};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    MalformedInput = 4,
    BadInput = 5,
    Runtime = 6,
    Panic = 7,
}

/// Binary mask volume.
pub struct NsMask(MaskVolume);

/// Trained VAE.
pub struct NsModel(VaeParams<f32>);

/// Healthy-cohort latent statistics for zero-shot scoring.
pub struct NsNormative(CohortStats);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> NsStatus {
    match e {
        Error::Io { .. } => NsStatus::Io,
        Error::MalformedHeader(_)
        | Error::SizeMismatch { .. }
        | Error::NonBinaryVoxel { .. }
        | Error::Checkpoint(_) => NsStatus::MalformedInput,
        Error::InvalidSpacing(_) | Error::InvalidDims(_) | Error::InvalidParameter(_) => NsStatus::InvalidArgument,
        Error::NonFiniteLoss { .. }
        | Error::VolumeMatchFailed(_)
        | Error::GenerationExhausted(_)
        | Error::DegenerateShape(_)
        | Error::ResampleExhausted(_)
        | Error::StepOverflow { .. }
        | Error::ShapeMismatch(_) => NsStatus::Runtime,
        _ => NsStatus::BadInput,
    }
}

fn guard(f: impl FnOnce() -> Result<(), NsStatus>) -> NsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NsStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            NsStatus::Panic
        }
    }
}

fn fail(e: Error) -> NsStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> NsStatus {
    set_error(format!("null argument: {what}"));
    NsStatus::NullArgument
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, NsStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], NsStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, NsStatus> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p).to_str().map(str::to_owned).map_err(|_| {
        set_error("path is not valid UTF-8");
        NsStatus::InvalidArgument
    })
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), NsStatus> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

/// Message of the last failed call on this thread; empty if none.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ns_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ns_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a mask from `nx*ny*nz` voxels (x fastest), each 0 or 1.
#[no_mangle]
pub unsafe extern "C" fn ns_mask_new(
    dims: *const usize,
    spacing: *const f64,
    voxels: *const u8,
    len: usize,
    out: *mut *mut NsMask,
) -> NsStatus {
    guard(|| {
        let d = slice(dims, 3, "dims")?;
        let s = slice(spacing, 3, "spacing")?;
        let v = slice(voxels, len, "voxels")?;
        let m = MaskVolume::new([d[0], d[1], d[2]], [s[0], s[1], s[2]], v.to_vec()).map_err(fail)?;
        put(out, NsMask(m))
    })
}

/// Reads a mask file.
#[no_mangle]
pub unsafe extern "C" fn ns_mask_load(path: *const c_char, out: *mut *mut NsMask) -> NsStatus {
    guard(|| {
        let m = volume::load_mask(path_arg(path)?).map_err(fail)?;
        put(out, NsMask(m))
    })
}

/// Writes a mask file.
#[no_mangle]
pub unsafe extern "C" fn ns_mask_save(mask: *const NsMask, path: *const c_char) -> NsStatus {
    guard(|| {
        let m = deref(mask, "mask")?;
        volume::save_mask(&m.0, path_arg(path)?).map_err(fail)
    })
}

/// Writes the grid extents `[nx, ny, nz]` into `dims`.
#[no_mangle]
pub unsafe extern "C" fn ns_mask_dims(mask: *const NsMask, dims: *mut usize) -> NsStatus {
    guard(|| {
        let m = deref(mask, "mask")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        ptr::copy_nonoverlapping(m.0.dims().as_ptr(), dims, 3);
        Ok(())
    })
}

/// Foreground volume in mm^3.
#[no_mangle]
pub unsafe extern "C" fn ns_mask_volume_mm3(mask: *const NsMask, out: *mut f64) -> NsStatus {
    guard(|| {
        let m = deref(mask, "mask")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = volume::volume_mm3(&m.0);
        Ok(())
    })
}

/// Dice overlap of two masks on the same grid.
#[no_mangle]
pub unsafe extern "C" fn ns_dice(a: *const NsMask, b: *const NsMask, out: *mut f64) -> NsStatus {
    guard(|| {
        let (a, b) = (deref(a, "a")?, deref(b, "b")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = volume::dice(&a.0, &b.0).map_err(fail)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ns_mask_free(mask: *mut NsMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Loads a model checkpoint.
#[no_mangle]
pub unsafe extern "C" fn ns_model_load(path: *const c_char, out: *mut *mut NsModel) -> NsStatus {
    guard(|| {
        let m = VaeParams::load(path_arg(path)?).map_err(fail)?;
        put(out, NsModel(m))
    })
}

/// Latent dimension of the model.
#[no_mangle]
pub unsafe extern "C" fn ns_model_latent_dim(model: *const NsModel, out: *mut usize) -> NsStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.0.config().latent_dim;
        Ok(())
    })
}

/// Posterior mean of `mask`, written to `mu[0..len]`; `len` must equal the
/// latent dimension.
#[no_mangle]
pub unsafe extern "C" fn ns_model_encode(
    model: *const NsModel,
    mask: *const NsMask,
    mu: *mut f64,
    len: usize,
) -> NsStatus {
    guard(|| {
        let (m, x) = (deref(model, "model")?, deref(mask, "mask")?);
        let post = m.0.encode(&x.0).map_err(fail)?;
        if len != post.mu.len() {
            return Err(fail(Error::LengthMismatch {
                expected: post.mu.len(),
                found: len,
            }));
        }
        if mu.is_null() {
            return Err(null("mu"));
        }
        ptr::copy_nonoverlapping(post.mu.as_ptr(), mu, len);
        Ok(())
    })
}

/// Thresholded reconstruction of `mask` through the model.
#[no_mangle]
pub unsafe extern "C" fn ns_model_reconstruct(
    model: *const NsModel,
    mask: *const NsMask,
    out: *mut *mut NsMask,
) -> NsStatus {
    guard(|| {
        let (m, x) = (deref(model, "model")?, deref(mask, "mask")?);
        let r = m.0.reconstruct(&x.0).map_err(fail)?;
        put(out, NsMask(r))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ns_model_free(model: *mut NsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fits cohort statistics from `n` row-major latent vectors of length `dim`.
#[no_mangle]
pub unsafe extern "C" fn ns_normative_fit(
    latents: *const f64,
    n: usize,
    dim: usize,
    out: *mut *mut NsNormative,
) -> NsStatus {
    guard(|| {
        let flat = slice(latents, n * dim, "latents")?;
        if dim == 0 {
            return Err(fail(Error::InvalidParameter("dim must be positive".into())));
        }
        let rows: Vec<Vec<f64>> = flat.chunks(dim).map(<[f64]>::to_vec).collect();
        let stats = detect::fit_normative(&rows).map_err(fail)?;
        put(out, NsNormative(stats))
    })
}

/// Zero-shot abnormality score: distance from `z` to the cohort mean.
#[no_mangle]
pub unsafe extern "C" fn ns_zero_shot_score(
    stats: *const NsNormative,
    z: *const f64,
    dim: usize,
    out: *mut f64,
) -> NsStatus {
    guard(|| {
        let s = deref(stats, "stats")?;
        let z = slice(z, dim, "z")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = detect::zero_shot_score(z, &s.0).map_err(fail)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ns_normative_free(stats: *mut NsNormative) {
    if !stats.is_null() {
        drop(Box::from_raw(stats));
    }
}

/// Area under the ROC curve; labels are 0 (healthy) or 1 (abnormal).
#[no_mangle]
pub unsafe extern "C" fn ns_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> NsStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let l = slice(labels, n, "labels")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = eval::auc(s, l).map_err(fail)?;
        Ok(())
    })
}
