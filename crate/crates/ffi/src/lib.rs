//! C ABI over the mtdml estimator.
//!
//! Every function returns an [`MtdmlStatus`]. On failure the message is
//! available from [`mtdml_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Matrices are row-major
//! `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mtdml::data::{generate_synthetic, load_csv, save_csv, Dataset, DgpConfig};
use mtdml::nn::Tensor2;
use mtdml::training::{crossfit_train, CrossFitEnsemble, TrainConfig};
use mtdml::MtdmlError;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MtdmlStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8 or an inconsistent length argument.
    InvalidArgument = 1,
    /// Bad configuration or degenerate input.
    Config = 2,
    /// File, parse or serialization failure.
    Io = 3,
    /// Non-finite values or an invalid internal state.
    Numeric = 4,
    /// Shapes disagree with the model or dataset.
    Dimension = 5,
    /// The input lacks something the operation needs.
    Capability = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

pub struct MtdmlDataset {
    inner: Dataset,
}

pub struct MtdmlEnsemble {
    inner: CrossFitEnsemble,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &MtdmlError) -> MtdmlStatus {
    match e {
        MtdmlError::Dimension { .. } => MtdmlStatus::Dimension,
        MtdmlError::Config(_) | MtdmlError::Degenerate(_) => MtdmlStatus::Config,
        MtdmlError::Capability(_) => MtdmlStatus::Capability,
        MtdmlError::Io { .. } | MtdmlError::Parse { .. } | MtdmlError::Serde(_) => MtdmlStatus::Io,
        MtdmlError::Numeric { .. } | MtdmlError::Domain(_) | MtdmlError::State(_) => MtdmlStatus::Numeric,
    }
}

enum Failure {
    Arg(String),
    Core(MtdmlError),
}

impl From<MtdmlError> for Failure {
    fn from(e: MtdmlError) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MtdmlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            MtdmlStatus::Ok
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_last_error(&msg);
            MtdmlStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic");
            MtdmlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{name} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::Arg(format!("{name} is null")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Arg(format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Arg(format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Arg("output handle pointer is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> Result<T, Failure> {
    match text {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| Failure::Core(MtdmlError::Config(e.to_string()))),
    }
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Result<Tensor2, Failure> {
    Ok(Tensor2::from_vec(rows, cols, data.to_vec())?)
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mtdml_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Draws a synthetic dataset. `dgp_json` may be null for defaults.
///
/// # Safety
/// `dgp_json` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtdml_dataset_generate(dgp_json: *const c_char, out: *mut *mut MtdmlDataset) -> MtdmlStatus {
    guard(|| {
        let cfg: DgpConfig = parse_json(opt_str_arg(dgp_json, "dgp_json")?)?;
        let ds = generate_synthetic(&cfg)?;
        put(out, MtdmlDataset { inner: ds })
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtdml_dataset_load_csv(path: *const c_char, out: *mut *mut MtdmlDataset) -> MtdmlStatus {
    guard(|| {
        let ds = load_csv(str_arg(path, "path")?)?;
        put(out, MtdmlDataset { inner: ds })
    })
}

/// # Safety
/// `ds` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mtdml_dataset_save_csv(ds: *const MtdmlDataset, path: *const c_char) -> MtdmlStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        Ok(save_csv(&ds.inner, str_arg(path, "path")?)?)
    })
}

/// Row count, covariate count and treatment count. Any output may be null.
///
/// # Safety
/// `ds` must come from this library; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtdml_dataset_shape(
    ds: *const MtdmlDataset,
    n_rows: *mut usize,
    n_covariates: *mut usize,
    n_treatments: *mut usize,
) -> MtdmlStatus {
    guard(|| {
        let ds = &ref_arg(ds, "dataset")?.inner;
        for (p, v) in [(n_rows, ds.len()), (n_covariates, ds.dim()), (n_treatments, ds.treatment_dim())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or come from this library, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtdml_dataset_free(ds: *mut MtdmlDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fits the cross-fitted ensemble. `train_json` may be null for defaults.
///
/// # Safety
/// `ds` must come from this library; `train_json` null or NUL-terminated;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtdml_train(
    ds: *const MtdmlDataset,
    train_json: *const c_char,
    out: *mut *mut MtdmlEnsemble,
) -> MtdmlStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let cfg: TrainConfig = parse_json(opt_str_arg(train_json, "train_json")?)?;
        let ens = crossfit_train(&ds.inner, &cfg)?;
        put(out, MtdmlEnsemble { inner: ens })
    })
}

/// # Safety
/// `ens` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mtdml_ensemble_save(ens: *const MtdmlEnsemble, path: *const c_char) -> MtdmlStatus {
    guard(|| {
        let ens = ref_arg(ens, "ensemble")?;
        Ok(ens.inner.save(str_arg(path, "path")?)?)
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtdml_ensemble_load(path: *const c_char, out: *mut *mut MtdmlEnsemble) -> MtdmlStatus {
    guard(|| {
        let ens = CrossFitEnsemble::load(str_arg(path, "path")?)?;
        put(out, MtdmlEnsemble { inner: ens })
    })
}

/// Covariate and treatment counts the ensemble expects. Either output may be null.
///
/// # Safety
/// `ens` must come from this library; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtdml_ensemble_dims(
    ens: *const MtdmlEnsemble,
    n_covariates: *mut usize,
    n_treatments: *mut usize,
) -> MtdmlStatus {
    guard(|| {
        let ens = &ref_arg(ens, "ensemble")?.inner;
        if !n_covariates.is_null() {
            *n_covariates = ens.input_dim();
        }
        if !n_treatments.is_null() {
            *n_treatments = ens.treatment_dim();
        }
        Ok(())
    })
}

/// Per-row outcome change from `t_from` to `t_to`, written to `out[n_rows]`.
/// `x` is `n_rows x n_covariates`; both treatment vectors have `n_treatments` entries.
///
/// # Safety
/// All arrays must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn mtdml_ensemble_uplift(
    ens: *const MtdmlEnsemble,
    x: *const f64,
    n_rows: usize,
    n_covariates: usize,
    t_from: *const f64,
    t_to: *const f64,
    n_treatments: usize,
    out: *mut f64,
) -> MtdmlStatus {
    guard(|| {
        let ens = &ref_arg(ens, "ensemble")?.inner;
        let x = matrix(slice_arg(x, n_rows * n_covariates, "x")?, n_rows, n_covariates)?;
        let from = slice_arg(t_from, n_treatments, "t_from")?;
        let to = slice_arg(t_to, n_treatments, "t_to")?;
        let delta = ens.uplift(&x, from, to)?;
        out_slice(out, n_rows, "out")?.copy_from_slice(&delta);
        Ok(())
    })
}

/// Final outcome prediction into `y_out[n_rows]` and, when `kappa_out` is not
/// null, sensitivities into `kappa_out[n_rows * n_treatments]`.
///
/// # Safety
/// All arrays must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn mtdml_ensemble_predict(
    ens: *const MtdmlEnsemble,
    x: *const f64,
    n_rows: usize,
    n_covariates: usize,
    t: *const f64,
    n_treatments: usize,
    y_out: *mut f64,
    kappa_out: *mut f64,
) -> MtdmlStatus {
    guard(|| {
        let ens = &ref_arg(ens, "ensemble")?.inner;
        let x = matrix(slice_arg(x, n_rows * n_covariates, "x")?, n_rows, n_covariates)?;
        let t = matrix(slice_arg(t, n_rows * n_treatments, "t")?, n_rows, n_treatments)?;
        let pred = ens.predict(&x, &t)?;
        out_slice(y_out, n_rows, "y_out")?.copy_from_slice(&pred.y_final);
        if !kappa_out.is_null() {
            out_slice(kappa_out, n_rows * n_treatments, "kappa_out")?.copy_from_slice(pred.kappa.as_slice());
        }
        Ok(())
    })
}

/// # Safety
/// `ens` must be null or come from this library, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtdml_ensemble_free(ens: *mut MtdmlEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}

/// Copies the dataset's covariates, treatments and outcomes into caller
/// buffers sized from [`mtdml_dataset_shape`]. Any output may be null.
///
/// # Safety
/// Non-null outputs must hold `n*d`, `n*k_t` and `n` doubles respectively.
#[no_mangle]
pub unsafe extern "C" fn mtdml_dataset_copy(
    ds: *const MtdmlDataset,
    x_out: *mut f64,
    t_out: *mut f64,
    y_out: *mut f64,
) -> MtdmlStatus {
    guard(|| {
        let ds = &ref_arg(ds, "dataset")?.inner;
        for (p, src) in [(x_out, ds.x.as_slice()), (t_out, ds.t.as_slice()), (y_out, ds.y.as_slice())] {
            if !p.is_null() {
                ptr::copy_nonoverlapping(src.as_ptr(), p, src.len());
            }
        }
        Ok(())
    })
}
