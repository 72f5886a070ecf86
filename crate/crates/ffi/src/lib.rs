//! C ABI over the trained artifacts: load a model or a factor artifact,
//! score songs, and compute NDCG.
//!
//! Every fallible call returns an [`AvdrecStatus`]; on failure a message is
//! available from [`avdrec_last_error`] on the same thread. Handles are
//! opaque and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};

use avdrec::cf::{self, FactorModel};
use avdrec::eval;
use avdrec::features::FactorArtifact;
use avdrec::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvdrecStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Io = 3,
    Parse = 4,
    Data = 5,
    Numeric = 6,
    Capability = 7,
    HashMismatch = 8,
    Panic = 9,
}

impl From<&Error> for AvdrecStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::Path { .. } => AvdrecStatus::Config,
            Error::Io(_) => AvdrecStatus::Io,
            Error::Parse { .. } | Error::Artifact(_) => AvdrecStatus::Parse,
            Error::Data(_) | Error::Index(_) => AvdrecStatus::Data,
            Error::Capability(_) => AvdrecStatus::Capability,
            Error::HashMismatch { .. } => AvdrecStatus::HashMismatch,
            _ => AvdrecStatus::Numeric,
        }
    }
}

/// Opaque trained model.
pub struct AvdrecModel(FactorModel);

/// Opaque content-factor artifact.
pub struct AvdrecFactors(FactorArtifact);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: AvdrecStatus, msg: impl Into<String>) -> AvdrecStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), AvdrecStatus>) -> AvdrecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AvdrecStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(AvdrecStatus::Panic, "internal panic"),
    }
}

fn check(e: Error) -> AvdrecStatus {
    let status = AvdrecStatus::from(&e);
    fail(status, e.to_string())
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), AvdrecStatus> {
    if p.is_null() {
        Err(fail(AvdrecStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, AvdrecStatus> {
    non_null(path, "path")?;
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(AvdrecStatus::Config, "path is not valid UTF-8"))
}

fn open(path: &str) -> Result<BufReader<File>, AvdrecStatus> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| fail(AvdrecStatus::Io, format!("{path}: {e}")))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes, excluding
/// the terminator.
///
/// # Safety
/// `buf` must be null or point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn avdrec_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a model file written by `avdrec train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avdrec_model_load(
    path: *const c_char,
    out: *mut *mut AvdrecModel,
) -> AvdrecStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let reader = open(path_arg(path)?)?;
        let (model, _hash) = FactorModel::read(reader).map_err(check)?;
        *out = Box::into_raw(Box::new(AvdrecModel(model)));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`avdrec_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn avdrec_model_free(model: *mut AvdrecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Model dimensions; `content_dim` is 0 for a content-free model. Any
/// output pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn avdrec_model_dims(
    model: *const AvdrecModel,
    n_users: *mut usize,
    n_items: *mut usize,
    rank: *mut usize,
    content_dim: *mut usize,
) -> AvdrecStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = &(*model).0;
        for (p, v) in [
            (n_users, m.n_users()),
            (n_items, m.n_items()),
            (rank, m.rank()),
            (content_dim, m.content_dim()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Score of a training-set song for `user`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn avdrec_predict_in_matrix(
    model: *const AvdrecModel,
    user: usize,
    item: usize,
    out: *mut f64,
) -> AvdrecStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = cf::predict_in_matrix(&(*model).0, user, item).map_err(check)?;
        Ok(())
    })
}

/// Cold-start score of a song with content factors `z[0..len]`.
///
/// # Safety
/// `model` must be a live handle, `z` must hold `len` doubles and `out` be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn avdrec_predict_out_of_matrix(
    model: *const AvdrecModel,
    user: usize,
    z: *const f64,
    len: usize,
    out: *mut f64,
) -> AvdrecStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(z, "z")?;
        non_null(out, "out")?;
        let z = DVector::from_column_slice(std::slice::from_raw_parts(z, len));
        *out = cf::predict_out_of_matrix(&(*model).0, user, &z).map_err(check)?;
        Ok(())
    })
}

/// Loads a factor artifact written by `avdrec features`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avdrec_factors_load(
    path: *const c_char,
    out: *mut *mut AvdrecFactors,
) -> AvdrecStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let reader = open(path_arg(path)?)?;
        let artifact = FactorArtifact::read(reader).map_err(check)?;
        *out = Box::into_raw(Box::new(AvdrecFactors(artifact)));
        Ok(())
    })
}

/// Releases a factor artifact. Null is ignored.
///
/// # Safety
/// `factors` must come from [`avdrec_factors_load`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn avdrec_factors_free(factors: *mut AvdrecFactors) {
    if !factors.is_null() {
        drop(Box::from_raw(factors));
    }
}

/// Number of raw features expected and factors produced.
///
/// # Safety
/// `factors` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn avdrec_factors_dims(
    factors: *const AvdrecFactors,
    n_features: *mut usize,
    n_factors: *mut usize,
) -> AvdrecStatus {
    guard(|| {
        non_null(factors, "factors")?;
        let r = &(*factors).0.result;
        if !n_features.is_null() {
            *n_features = r.n_features();
        }
        if !n_factors.is_null() {
            *n_factors = r.n_factors();
        }
        Ok(())
    })
}

/// Content factors of one song from its raw (unstandardized) features.
///
/// # Safety
/// `raw` must hold `n_features` doubles and `out` room for `n_factors`.
#[no_mangle]
pub unsafe extern "C" fn avdrec_factors_score(
    factors: *const AvdrecFactors,
    raw: *const f64,
    n_features: usize,
    out: *mut f64,
    n_factors: usize,
) -> AvdrecStatus {
    guard(|| {
        non_null(factors, "factors")?;
        non_null(raw, "raw")?;
        non_null(out, "out")?;
        let a = &(*factors).0;
        if n_factors != a.result.n_factors() {
            return Err(fail(
                AvdrecStatus::Data,
                format!(
                    "output holds {n_factors} values, artifact has {} factors",
                    a.result.n_factors()
                ),
            ));
        }
        let x = DMatrix::from_row_slice(1, n_features, std::slice::from_raw_parts(raw, n_features));
        let z = a.score_raw(&x).map_err(check)?;
        std::slice::from_raw_parts_mut(out, n_factors)
            .copy_from_slice(z.row(0).transpose().as_slice());
        Ok(())
    })
}

/// NDCG of a ranked list of relevance flags (nonzero = relevant). Writes NaN
/// when the list holds no relevant item.
///
/// # Safety
/// `relevance` must hold `len` bytes (or be null with `len == 0`) and `out`
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn avdrec_ndcg(
    relevance: *const u8,
    len: usize,
    out: *mut f64,
) -> AvdrecStatus {
    guard(|| {
        non_null(out, "out")?;
        let flags: Vec<bool> = if len == 0 {
            Vec::new()
        } else {
            non_null(relevance, "relevance")?;
            std::slice::from_raw_parts(relevance, len)
                .iter()
                .map(|&b| b != 0)
                .collect()
        };
        *out = eval::ndcg(&flags).unwrap_or(f64::NAN);
        Ok(())
    })
}
