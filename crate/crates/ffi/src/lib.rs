//! C ABI for the ifmmin library. All functions return an `IfmminStatus`
//! code; on failure the message is retrievable with `ifmmin_last_error`.
//! Configs are opaque handles created from the same key=value text the CLI
//! accepts, and heavy artifacts (datasets, checkpoints, reports) move
//! through the filesystem rather than across the boundary.

use ifmmin::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use ifmmin::config::RunConfig;
use ifmmin::data;
use ifmmin::pipeline;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Result codes for every API call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum IfmminStatus {
    Ok = 0,
    /// Bad configuration or bad arguments.
    Invalid = 1,
    /// I/O, serialization, or internal failure.
    Failed = 2,
    /// A required pointer was null or a string was not valid UTF-8.
    NullPointer = 3,
}

/// Opaque run configuration handle.
pub struct IfmminConfig {
    inner: RunConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(e: ifmmin::Error) -> IfmminStatus {
    set_error(e.to_string());
    match e.exit_code() {
        1 => IfmminStatus::Invalid,
        _ => IfmminStatus::Failed,
    }
}

/// Message for the most recent failure on this thread, or null if the last
/// call succeeded. The pointer is valid until the next failing call.
#[no_mangle]
pub extern "C" fn ifmmin_last_error() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map(|c| c.as_ptr())
            .unwrap_or(std::ptr::null())
    })
}

unsafe fn cstr<'a>(p: *const c_char) -> Result<&'a str, IfmminStatus> {
    if p.is_null() {
        set_error("null pointer argument".into());
        return Err(IfmminStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8".into());
        IfmminStatus::NullPointer
    })
}

/// Parse key=value configuration text into a new handle. On success the
/// handle is written to `out` and must be released with
/// `ifmmin_config_free`.
///
/// # Safety
/// `text` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ifmmin_config_parse(
    text: *const c_char,
    out: *mut *mut IfmminConfig,
) -> IfmminStatus {
    if out.is_null() {
        set_error("null output pointer".into());
        return IfmminStatus::NullPointer;
    }
    let text = match cstr(text) {
        Ok(t) => t,
        Err(s) => return s,
    };
    match RunConfig::parse(text) {
        Ok(cfg) => {
            *out = Box::into_raw(Box::new(IfmminConfig { inner: cfg }));
            IfmminStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Release a config handle. Null is ignored.
///
/// # Safety
/// `cfg` must be a handle from `ifmmin_config_parse`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ifmmin_config_free(cfg: *mut IfmminConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

fn write_dataset(cfg: &RunConfig, path: &str) -> ifmmin::Result<()> {
    let utts = data::generate(&cfg.synth)?;
    let mut w = BufWriter::new(File::create(path)?);
    data::write_jsonl(&mut w, &utts)
}

/// Generate the configured synthetic dataset and write it as JSONL.
///
/// # Safety
/// `cfg` must be a live config handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn ifmmin_generate_dataset(
    cfg: *const IfmminConfig,
    path: *const c_char,
) -> IfmminStatus {
    if cfg.is_null() {
        set_error("null config handle".into());
        return IfmminStatus::NullPointer;
    }
    let path = match cstr(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match write_dataset(&(*cfg).inner, path) {
        Ok(()) => IfmminStatus::Ok,
        Err(e) => fail(e),
    }
}

fn load_dataset(path: &str) -> ifmmin::Result<Vec<data::RawUtterance>> {
    let r = BufReader::new(File::open(path)?);
    data::read_jsonl(r)
}

fn run_pretrain(cfg: &RunConfig, dataset: &str, out: &str) -> ifmmin::Result<()> {
    let utts = load_dataset(dataset)?;
    let result = pipeline::pretrain(&utts, &cfg.train)?;
    let mut w = BufWriter::new(File::create(out)?);
    write_checkpoint(&mut w, &result.params, &cfg.fingerprint())
}

/// Stage-1 pretraining: read the dataset, train, write the teacher
/// checkpoint.
///
/// # Safety
/// `cfg` must be a live config handle; the paths valid strings.
#[no_mangle]
pub unsafe extern "C" fn ifmmin_pretrain(
    cfg: *const IfmminConfig,
    dataset: *const c_char,
    checkpoint_out: *const c_char,
) -> IfmminStatus {
    if cfg.is_null() {
        set_error("null config handle".into());
        return IfmminStatus::NullPointer;
    }
    let (dataset, out) = match (cstr(dataset), cstr(checkpoint_out)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    match run_pretrain(&(*cfg).inner, dataset, out) {
        Ok(()) => IfmminStatus::Ok,
        Err(e) => fail(e),
    }
}

fn load_ckpt(path: &str) -> ifmmin::Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

fn run_train(
    cfg: &RunConfig,
    dataset: &str,
    teacher_path: &str,
    out: &str,
) -> ifmmin::Result<()> {
    let utts = load_dataset(dataset)?;
    let teacher = load_ckpt(teacher_path)?;
    let result = pipeline::train_ifmmin(&utts, &teacher.params, &cfg.train)?;
    let mut w = BufWriter::new(File::create(out)?);
    write_checkpoint(&mut w, &result.params, &cfg.fingerprint())
}

/// Stage-2 training against a frozen teacher checkpoint; writes the student
/// checkpoint with the best validation accuracy.
///
/// # Safety
/// `cfg` must be a live config handle; the paths valid strings.
#[no_mangle]
pub unsafe extern "C" fn ifmmin_train(
    cfg: *const IfmminConfig,
    dataset: *const c_char,
    teacher_checkpoint: *const c_char,
    checkpoint_out: *const c_char,
) -> IfmminStatus {
    if cfg.is_null() {
        set_error("null config handle".into());
        return IfmminStatus::NullPointer;
    }
    let (dataset, teacher, out) = match (cstr(dataset), cstr(teacher_checkpoint), cstr(checkpoint_out)) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
    };
    match run_train(&(*cfg).inner, dataset, teacher, out) {
        Ok(()) => IfmminStatus::Ok,
        Err(e) => fail(e),
    }
}

fn run_evaluate(cfg: &RunConfig, dataset: &str, ckpt_path: &str) -> ifmmin::Result<String> {
    let utts = load_dataset(dataset)?;
    let ckpt = load_ckpt(ckpt_path)?;
    let spec = cfg.train.model_spec();
    let no_ifim = !ckpt.params.contains("ifim.ae0.enc0.w");
    let report = data::evaluate_conditions(
        &spec,
        &ckpt.params,
        no_ifim,
        !cfg.train.no_cascaded_input,
        &utts,
    )?;
    Ok(serde_json::to_string_pretty(&report)?)
}

/// Evaluate a student checkpoint over every missing-modality condition.
/// On success `report_out` receives a JSON string owned by the caller; free
/// it with `ifmmin_string_free`.
///
/// # Safety
/// `cfg` must be a live config handle; the paths valid strings; `report_out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ifmmin_evaluate(
    cfg: *const IfmminConfig,
    dataset: *const c_char,
    checkpoint: *const c_char,
    report_out: *mut *mut c_char,
) -> IfmminStatus {
    if cfg.is_null() || report_out.is_null() {
        set_error("null pointer argument".into());
        return IfmminStatus::NullPointer;
    }
    let (dataset, ckpt) = match (cstr(dataset), cstr(checkpoint)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    match run_evaluate(&(*cfg).inner, dataset, ckpt) {
        Ok(json) => {
            let c = CString::new(json).unwrap_or_default();
            *report_out = c.into_raw();
            IfmminStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Free a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn ifmmin_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// True if `path` holds a readable checkpoint compatible with `cfg`
/// (matching config fingerprint).
///
/// # Safety
/// `cfg` must be a live config handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn ifmmin_checkpoint_matches(
    cfg: *const IfmminConfig,
    path: *const c_char,
) -> bool {
    if cfg.is_null() {
        return false;
    }
    let Ok(path) = cstr(path) else { return false };
    if !Path::new(path).is_file() {
        return false;
    }
    match load_ckpt(path) {
        Ok(ck) => ck.config == (*cfg).inner.fingerprint(),
        Err(_) => false,
    }
}
