//! C ABI over the laboratory.
//!
//! Configs and attack outcomes cross the boundary as opaque handles. Every
//! fallible call returns a [`CafeLabStatus`]; on failure the message is kept
//! per thread and read back with [`cafe_lab_last_error`]. Handles are not
//! thread-safe: use one handle from one thread at a time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cafe_lab::attack::AttackOutcome;
use cafe_lab::config::ExperimentConfig;
use cafe_lab::experiment::{attack_with, cmd_attack};
use cafe_lab::LabError;

/// Status codes. Values below 50 mirror the library's error codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CafeLabStatus {
    Ok = 0,
    Dimension = 10,
    InvalidArgument = 11,
    EnumerationCap = 12,
    KeyMismatch = 13,
    RegenerationsExhausted = 20,
    Format = 30,
    Truncated = 31,
    Io = 32,
    Config = 40,
    /// A required pointer argument was null.
    NullPointer = 50,
    /// A string argument was not valid UTF-8.
    Utf8 = 51,
    /// Caller buffer too small; the needed length is still reported.
    BufferTooSmall = 52,
    /// The library panicked. This is a bug.
    Panic = 60,
}

impl CafeLabStatus {
    fn from_code(code: i32) -> Self {
        use CafeLabStatus::*;
        match code {
            10 => Dimension,
            11 => InvalidArgument,
            12 => EnumerationCap,
            13 => KeyMismatch,
            20 => RegenerationsExhausted,
            30 => Format,
            31 => Truncated,
            32 => Io,
            40 => Config,
            _ => Panic,
        }
    }
}

/// Opaque experiment configuration.
pub struct CafeLabConfig(ExperimentConfig);

/// Opaque result of one attack run.
pub struct CafeLabOutcome(AttackOutcome);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: CafeLabStatus, msg: impl Into<String>) -> CafeLabStatus {
    set_error(msg.into());
    status
}

fn lab_fail(e: LabError) -> CafeLabStatus {
    fail(CafeLabStatus::from_code(e.code()), e.to_string())
}

/// Clears the error slot, runs `f` and converts panics into a status.
fn guard(f: impl FnOnce() -> CafeLabStatus) -> CafeLabStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(CafeLabStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, CafeLabStatus> {
    if p.is_null() {
        return Err(fail(CafeLabStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CafeLabStatus::Utf8, format!("{what} is not valid UTF-8")))
}

fn store_config(out: *mut *mut CafeLabConfig, r: cafe_lab::Result<ExperimentConfig>) -> CafeLabStatus {
    match r {
        Ok(cfg) => {
            unsafe { *out = Box::into_raw(Box::new(CafeLabConfig(cfg))) };
            CafeLabStatus::Ok
        }
        Err(e) => lab_fail(e),
    }
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into the library.
#[no_mangle]
pub extern "C" fn cafe_lab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a shipped preset by name into `*out`.
///
/// # Safety
/// `name` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cafe_lab_config_from_preset(
    name: *const c_char,
    out: *mut *mut CafeLabConfig,
) -> CafeLabStatus {
    guard(|| {
        if out.is_null() {
            return fail(CafeLabStatus::NullPointer, "out is null");
        }
        match read_str(name, "name") {
            Ok(n) => store_config(out, ExperimentConfig::preset(n)),
            Err(s) => s,
        }
    })
}

/// Parses a TOML config document into `*out`.
///
/// # Safety
/// `text` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cafe_lab_config_from_toml(
    text: *const c_char,
    out: *mut *mut CafeLabConfig,
) -> CafeLabStatus {
    guard(|| {
        if out.is_null() {
            return fail(CafeLabStatus::NullPointer, "out is null");
        }
        match read_str(text, "text") {
            Ok(t) => store_config(out, ExperimentConfig::from_toml(t)),
            Err(s) => s,
        }
    })
}

/// Replaces the master seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cafe_lab_config_set_seed(cfg: *mut CafeLabConfig, seed: u64) -> CafeLabStatus {
    guard(|| match cfg.as_mut() {
        Some(c) => {
            c.0.seed = seed;
            CafeLabStatus::Ok
        }
        None => fail(CafeLabStatus::NullPointer, "cfg is null"),
    })
}

/// Writes the config as TOML into `buf` (nul-terminated). `*needed` receives
/// the required size including the terminator, also on `BufferTooSmall`.
///
/// # Safety
/// `cfg` must be a live handle, `buf` valid for `len` bytes (or null with
/// `len == 0`) and `needed` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cafe_lab_config_to_toml(
    cfg: *const CafeLabConfig,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> CafeLabStatus {
    guard(|| {
        let Some(c) = cfg.as_ref() else {
            return fail(CafeLabStatus::NullPointer, "cfg is null");
        };
        if needed.is_null() {
            return fail(CafeLabStatus::NullPointer, "needed is null");
        }
        let text = c.0.to_toml();
        *needed = text.len() + 1;
        if buf.is_null() || len < text.len() + 1 {
            return fail(CafeLabStatus::BufferTooSmall, format!("need {} bytes", text.len() + 1));
        }
        ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
        *buf.add(text.len()) = 0;
        CafeLabStatus::Ok
    })
}

/// Frees a config. Null is ignored.
///
/// # Safety
/// `cfg` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cafe_lab_config_free(cfg: *mut CafeLabConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the configured attack (with the configured defense) into `*out`.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cafe_lab_attack_run(
    cfg: *const CafeLabConfig,
    out: *mut *mut CafeLabOutcome,
) -> CafeLabStatus {
    guard(|| {
        let Some(c) = cfg.as_ref() else {
            return fail(CafeLabStatus::NullPointer, "cfg is null");
        };
        if out.is_null() {
            return fail(CafeLabStatus::NullPointer, "out is null");
        }
        match attack_with(&c.0, c.0.defense) {
            Ok(o) => {
                *out = Box::into_raw(Box::new(CafeLabOutcome(o)));
                CafeLabStatus::Ok
            }
            Err(e) => lab_fail(e),
        }
    })
}

/// Runs the `attack` command, writing its output files under `dir`.
///
/// # Safety
/// `cfg` must be a live handle and `dir` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cafe_lab_attack_to_dir(cfg: *const CafeLabConfig, dir: *const c_char) -> CafeLabStatus {
    guard(|| {
        let Some(c) = cfg.as_ref() else {
            return fail(CafeLabStatus::NullPointer, "cfg is null");
        };
        match read_str(dir, "dir") {
            Ok(d) => match cmd_attack(&c.0, Path::new(d)) {
                Ok(_) => CafeLabStatus::Ok,
                Err(e) => lab_fail(e),
            },
            Err(s) => s,
        }
    })
}

/// Scalar summary of an outcome.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CafeLabSummary {
    pub psnr_db: f64,
    pub mse: f64,
    /// Server rounds consumed.
    pub rounds: u64,
    /// First round reaching the PSNR target, or 0 when never reached.
    pub target_reached_at: u64,
    pub warnings: u64,
}

/// Fills `*out` with the outcome's metrics.
///
/// # Safety
/// `outcome` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cafe_lab_outcome_summary(
    outcome: *const CafeLabOutcome,
    out: *mut CafeLabSummary,
) -> CafeLabStatus {
    guard(|| {
        let (Some(o), false) = (outcome.as_ref(), out.is_null()) else {
            return fail(CafeLabStatus::NullPointer, "outcome or out is null");
        };
        let o = &o.0;
        *out = CafeLabSummary {
            psnr_db: o.metrics.psnr_db,
            mse: o.metrics.mse,
            rounds: o.rounds as u64,
            target_reached_at: o.target_reached_at.unwrap_or(0) as u64,
            warnings: o.warnings.len() as u64,
        };
        CafeLabStatus::Ok
    })
}

/// Copies the recovered inputs (row-major, one row per sample) into `buf`.
/// `*needed` receives the element count, also on `BufferTooSmall`.
///
/// # Safety
/// `outcome` must be a live handle, `buf` valid for `len` doubles (or null
/// with `len == 0`) and `needed` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cafe_lab_outcome_fake_data(
    outcome: *const CafeLabOutcome,
    buf: *mut f64,
    len: usize,
    needed: *mut usize,
) -> CafeLabStatus {
    guard(|| {
        let (Some(o), false) = (outcome.as_ref(), needed.is_null()) else {
            return fail(CafeLabStatus::NullPointer, "outcome or needed is null");
        };
        let data = o.0.state.fake_data.data();
        *needed = data.len();
        if buf.is_null() || len < data.len() {
            return fail(CafeLabStatus::BufferTooSmall, format!("need {} values", data.len()));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        CafeLabStatus::Ok
    })
}

/// Frees an outcome. Null is ignored.
///
/// # Safety
/// `outcome` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cafe_lab_outcome_free(outcome: *mut CafeLabOutcome) {
    if !outcome.is_null() {
        drop(Box::from_raw(outcome));
    }
}
