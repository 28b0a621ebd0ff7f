//! C ABI for the ttac adaptation engine.
//!
//! Every function returns a [`TtacStatus`]; on failure the message is kept in
//! a thread-local slot readable with [`ttac_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function. Matrices are
//! row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ttac::data::Batch;
use ttac::engine::{Method, ProtocolConfig, Session, StreamReport};
use ttac::nalgebra::DMatrix;
use ttac::network::ModelParams;
use ttac::source::{infer_source_bank, InferConfig, SourceBank};
use ttac::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtacStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numerical = 4,
    Provenance = 5,
    Io = 6,
    Format = 7,
    Panic = 8,
}

/// Trained network parameters.
pub struct TtacModel {
    inner: ModelParams,
}

/// Per-class source Gaussians.
pub struct TtacSourceBank {
    inner: SourceBank,
}

/// A streaming adaptation session.
pub struct TtacSession {
    inner: Session,
    next_id: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TtacStatus {
    match e {
        Error::DimensionMismatch { .. } | Error::NotSquare { .. } => TtacStatus::DimensionMismatch,
        Error::NotSymmetric { .. }
        | Error::NotPositiveDefinite { .. }
        | Error::NonFinite(_)
        | Error::DegenerateMeans => TtacStatus::Numerical,
        Error::ProvenanceMismatch { .. } => TtacStatus::Provenance,
        Error::Io { .. } => TtacStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) => TtacStatus::Format,
        _ => TtacStatus::InvalidArgument,
    }
}

struct Failure(TtacStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(TtacStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TtacStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            TtacStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {message}"));
            TtacStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TtacStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn read_matrix(data: *const f64, rows: usize, cols: usize) -> Result<DMatrix<f64>, Failure> {
    if data.is_null() {
        return Err(null("inputs"));
    }
    if rows == 0 || cols == 0 {
        return Err(Failure(TtacStatus::InvalidArgument, "empty input matrix".into()));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Failure(TtacStatus::InvalidArgument, "input size overflows".into()))?;
    let values = std::slice::from_raw_parts(data, len);
    Ok(DMatrix::from_row_slice(rows, cols, values))
}

unsafe fn write_labels(out: *mut u32, labels: &[usize]) {
    let dst = std::slice::from_raw_parts_mut(out, labels.len());
    for (d, &l) in dst.iter_mut().zip(labels) {
        *d = l as u32;
    }
}

unsafe fn store<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ttac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes excluding
/// the terminator, or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ttac_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let Some(msg) = slot.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ttac_model_load(path: *const c_char, out: *mut *mut TtacModel) -> TtacStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(read_str(path, "path")?);
        store(out, TtacModel { inner: ModelParams::load_json(&path)? });
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`ttac_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ttac_model_free(model: *mut TtacModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the input dimension and class count of a model.
///
/// # Safety
/// `model` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn ttac_model_shape(
    model: *const TtacModel,
    input_dim: *mut usize,
    classes: *mut usize,
) -> TtacStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if !input_dim.is_null() {
            *input_dim = m.inner.input_dim();
        }
        if !classes.is_null() {
            *classes = m.inner.classes();
        }
        Ok(())
    })
}

/// Predicts labels for `rows` samples without adapting.
///
/// # Safety
/// `inputs` must hold `rows * cols` doubles and `labels` room for `rows`
/// values.
#[no_mangle]
pub unsafe extern "C" fn ttac_model_predict(
    model: *const TtacModel,
    inputs: *const f64,
    rows: usize,
    cols: usize,
    labels: *mut u32,
) -> TtacStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let x = read_matrix(inputs, rows, cols)?;
        write_labels(labels, &m.inner.predict(&x)?);
        Ok(())
    })
}

/// Loads a source bank.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ttac_source_bank_load(path: *const c_char, out: *mut *mut TtacSourceBank) -> TtacStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(read_str(path, "path")?);
        store(out, TtacSourceBank { inner: SourceBank::load_json(&path)? });
        Ok(())
    })
}

/// Infers a source bank from the classifier head of `model`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ttac_source_bank_infer(
    model: *const TtacModel,
    seed: u64,
    out: *mut *mut TtacSourceBank,
) -> TtacStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = InferConfig {
            seed,
            ..InferConfig::default()
        };
        let (bank, _) = infer_source_bank(&m.inner, &cfg)?;
        store(out, TtacSourceBank { inner: bank });
        Ok(())
    })
}

/// # Safety
/// `bank` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ttac_source_bank_save(bank: *const TtacSourceBank, path: *const c_char) -> TtacStatus {
    guard(|| {
        let b = bank.as_ref().ok_or_else(|| null("bank"))?;
        let path = PathBuf::from(read_str(path, "path")?);
        b.inner.save_json(&path)?;
        Ok(())
    })
}

/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ttac_source_bank_free(bank: *mut TtacSourceBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Starts a session. `method` is one of TTAC++, TEST, ENTROPY_MIN or
/// ST_ONLY. `config_json` may be null for defaults. `bank` may be null for
/// baselines. The model and bank are copied; the caller keeps ownership.
///
/// # Safety
/// Pointers must be null where allowed or valid otherwise.
#[no_mangle]
pub unsafe extern "C" fn ttac_session_new(
    model: *const TtacModel,
    bank: *const TtacSourceBank,
    method: *const c_char,
    config_json: *const c_char,
    out: *mut *mut TtacSession,
) -> TtacStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let method: Method = read_str(method, "method")?.parse()?;
        let cfg = if config_json.is_null() {
            ProtocolConfig::default()
        } else {
            ProtocolConfig::from_json(read_str(config_json, "config_json")?)?
        };
        let bank = bank.as_ref().map(|b| b.inner.clone());
        let session = Session::new(method, cfg, m.inner.clone(), bank)?;
        store(out, TtacSession { inner: session, next_id: 0 });
        Ok(())
    })
}

unsafe fn next_batch(
    s: &mut TtacSession,
    inputs: *const f64,
    rows: usize,
    cols: usize,
    truth: *const u32,
) -> Result<Batch, Failure> {
    let x = read_matrix(inputs, rows, cols)?;
    let labels = (!truth.is_null()).then(|| {
        std::slice::from_raw_parts(truth, rows)
            .iter()
            .map(|&l| l as usize)
            .collect()
    });
    let ids = (s.next_id..s.next_id + rows as u64).collect();
    s.next_id += rows as u64;
    Ok(Batch {
        ids,
        inputs: x,
        labels,
    })
}

/// Predicts an arrival batch, commits the labels, then adapts on it.
/// Samples get sequential ids in arrival order. `truth` may be null; when
/// given it is used only for error reporting.
///
/// # Safety
/// `inputs` must hold `rows * cols` doubles, `truth` (if not null) and
/// `labels` room for `rows` values.
#[no_mangle]
pub unsafe extern "C" fn ttac_session_process(
    session: *mut TtacSession,
    inputs: *const f64,
    rows: usize,
    cols: usize,
    truth: *const u32,
    labels: *mut u32,
) -> TtacStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let batch = next_batch(s, inputs, rows, cols, truth)?;
        let predicted = s.inner.process(&batch)?;
        write_labels(labels, &predicted);
        Ok(())
    })
}

/// Adapts on a batch without committing predictions.
///
/// # Safety
/// `inputs` must hold `rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn ttac_session_observe(
    session: *mut TtacSession,
    inputs: *const f64,
    rows: usize,
    cols: usize,
) -> TtacStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let batch = next_batch(s, inputs, rows, cols, ptr::null())?;
        s.inner.observe(&batch)?;
        Ok(())
    })
}

fn current_report(s: &TtacSession) -> StreamReport {
    let mut report = s.inner.report().clone();
    report.finalize();
    report
}

/// Cumulative error over the committed predictions that had truth labels.
///
/// # Safety
/// `session` must be a live handle and `error` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ttac_session_error_rate(session: *const TtacSession, error: *mut f64) -> TtacStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if error.is_null() {
            return Err(null("error"));
        }
        match current_report(s).final_error {
            Some(e) => {
                *error = e;
                Ok(())
            }
            None => Err(Failure(TtacStatus::InvalidArgument, "no labelled predictions yet".into())),
        }
    })
}

/// Writes report.json, cumulative_error.csv and predictions.csv into `dir`.
///
/// # Safety
/// `session` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ttac_session_write_report(session: *const TtacSession, dir: *const c_char) -> TtacStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let dir = PathBuf::from(read_str(dir, "dir")?);
        current_report(s).write_dir(&dir)?;
        Ok(())
    })
}

/// Saves the current adapted parameters as a checkpoint.
///
/// # Safety
/// `session` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ttac_session_save_model(session: *const TtacSession, path: *const c_char) -> TtacStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let path = PathBuf::from(read_str(path, "path")?);
        s.inner.params().save_json(&path)?;
        Ok(())
    })
}

/// # Safety
/// `session` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ttac_session_free(session: *mut TtacSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}
