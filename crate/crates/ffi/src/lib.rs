//! C interface to `lrvi`.
//!
//! Every fallible function returns an [`LrviStatus`]. On failure a message is
//! kept per thread and can be read with [`lrvi_last_error_message`]. Handles
//! are opaque and must be released with their `_free` function. Strings
//! handed out by the library are released with [`lrvi_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lrvi::cli::format::ModelFile;
use lrvi::cli::obs::parse_observations;
use lrvi::cli::pipeline::{run_pipeline, Method, PipelineConfig, Query, ResultDoc};
use lrvi::error::Error;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrviStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidArgument = 4,
    Computation = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Inference method for [`lrvi_infer`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrviMethod {
    Elimination = 0,
    Sampling = 1,
}

/// A parsed model.
pub struct LrviModel {
    inner: ModelFile,
}

/// The answer to one query.
pub struct LrviResult {
    inner: ResultDoc,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("interior nul removed")));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(LrviStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Parse { .. } => LrviStatus::Parse,
            Error::InvalidArgument(_) | Error::UnknownAtom(_) => LrviStatus::InvalidArgument,
            _ => LrviStatus::Computation,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LrviStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LrviStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LrviStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(LrviStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(LrviStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(LrviStatus::NullArgument, format!("{what} is null")))
}

fn out_arg<T>(p: *mut T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(LrviStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("interior nul removed").into_raw()
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn lrvi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn lrvi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a model in the text or JSON format.
///
/// # Safety
/// `text` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lrvi_model_parse(text: *const c_char, out: *mut *mut LrviModel) -> LrviStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = ptr::null_mut();
        let m = ModelFile::parse(str_arg(text, "text")?)?;
        m.validate()?;
        *out = Box::into_raw(Box::new(LrviModel { inner: m }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`lrvi_model_parse`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lrvi_model_free(model: *mut LrviModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of atoms declared by the model.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lrvi_model_atom_count(model: *const LrviModel, out: *mut usize) -> LrviStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = ref_arg(model, "model")?.inner.atoms.len();
        Ok(())
    })
}

/// Model serialized as JSON; release with [`lrvi_string_free`].
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lrvi_model_to_json(model: *const LrviModel, out: *mut *mut c_char) -> LrviStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = to_c_string(ref_arg(model, "model")?.inner.to_json());
        Ok(())
    })
}

/// Answers a query (`pmf:A`, `cdf:A:t`, `density:A:x` or `marginal:A,B`).
/// `observations` may be null; otherwise it is CSV or JSON text. Fitted
/// potentials are not cached across calls.
///
/// # Safety
/// String arguments must be nul-terminated, `model` a live handle and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn lrvi_infer(
    model: *const LrviModel,
    observations: *const c_char,
    query: *const c_char,
    method: LrviMethod,
    seed: u64,
    out: *mut *mut LrviResult,
) -> LrviStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = ptr::null_mut();
        let m = &ref_arg(model, "model")?.inner;
        let q: Query = str_arg(query, "query")?.parse()?;
        let obs = if observations.is_null() {
            Vec::new()
        } else {
            let atoms = m.atoms.iter().map(|a| (a.name.clone(), a.clone())).collect();
            parse_observations(str_arg(observations, "observations")?, &atoms)?
        };
        let cfg = PipelineConfig {
            seed,
            use_cache: false,
            ..Default::default()
        };
        let method = match method {
            LrviMethod::Elimination => Method::Ve,
            LrviMethod::Sampling => Method::Mcmc,
        };
        let (doc, _) = run_pipeline(m, &obs, &q, method, &cfg, None).map_err(|e| {
            let Fail(status, msg) = Fail::from(e.error);
            Fail(status, format!("{}: {msg}", e.stage))
        })?;
        *out = Box::into_raw(Box::new(LrviResult { inner: doc }));
        Ok(())
    })
}

/// # Safety
/// `result` must come from [`lrvi_infer`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lrvi_result_free(result: *mut LrviResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Copies the query estimate into `buf`. `len` holds the buffer capacity on
/// entry and the estimate length on return; a short buffer yields
/// `BufferTooSmall` with `len` set to the needed size. Marginal queries have
/// an empty estimate.
///
/// # Safety
/// `result` must be a live handle, `len` writable, and `buf` valid for `*len`
/// doubles (it may be null when `*len` is 0).
#[no_mangle]
pub unsafe extern "C" fn lrvi_result_estimate(result: *const LrviResult, buf: *mut f64, len: *mut usize) -> LrviStatus {
    guard(|| {
        out_arg(len, "len")?;
        let est = ref_arg(result, "result")?.inner.estimate.as_deref().unwrap_or(&[]);
        let cap = *len;
        *len = est.len();
        if cap < est.len() {
            return Err(Fail(LrviStatus::BufferTooSmall, format!("estimate needs {} values", est.len())));
        }
        if !est.is_empty() {
            out_arg(buf, "buf")?;
            ptr::copy_nonoverlapping(est.as_ptr(), buf, est.len());
        }
        Ok(())
    })
}

/// Full result document as JSON; release with [`lrvi_string_free`].
///
/// # Safety
/// `result` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lrvi_result_to_json(result: *const LrviResult, out: *mut *mut c_char) -> LrviStatus {
    guard(|| {
        out_arg(out, "out")?;
        let doc = &ref_arg(result, "result")?.inner;
        *out = to_c_string(serde_json::to_string(doc).map_err(|e| Fail(LrviStatus::Computation, e.to_string()))?);
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lrvi_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
