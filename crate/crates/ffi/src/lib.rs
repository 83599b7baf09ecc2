//! C ABI for the cascade-clock simulator.
//!
//! The surface follows the usual opaque-handle pattern: parse a configuration
//! into a `CcExperiment`, query it or run it, free it. All functions returning
//! [`CcStatus`] set a thread-local error message retrievable with
//! [`cc_last_error`] on failure. Strings are NUL-terminated UTF-8; returned
//! string pointers stay valid until the next call on the same thread (or for
//! the process lifetime where documented as static).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cascade_clock::analysis;
use cascade_clock::cascade::CascadeRunner;
use cascade_clock::error::ClockError;
use cascade_clock::experiment::{parse_config_text, run_experiment, ExperimentSpec, Mode};

/// Call outcome. Anything but `Ok` leaves a message in `cc_last_error`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcStatus {
    Ok = 0,
    ConfigError = 1,
    RuntimeError = 2,
    NullPointer = 3,
    InvalidUtf8 = 4,
}

/// Aggregated stability of a batch of trials.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CcStability {
    /// RMS fractional frequency offset sigma_gamma(tau).
    pub sigma: f64,
    /// Bootstrap standard error of sigma.
    pub sigma_stderr: f64,
    /// omega^2 sigma^2 tau / gamma.
    pub figure_of_merit: f64,
    /// Fraction of trials aborted by degenerate adaptive updates.
    pub abort_rate: f64,
    pub trials_completed: u64,
    pub trials_aborted: u64,
}

/// Opaque experiment handle.
pub struct CcExperiment {
    spec: ExperimentSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("no error").unwrap());
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let cstring = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = cstring);
}

fn status_of(err: &ClockError) -> CcStatus {
    match err {
        ClockError::Config(_) => CcStatus::ConfigError,
        _ => CcStatus::RuntimeError,
    }
}

/// Message of the last failed call on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Static human-readable name of a status code.
#[no_mangle]
pub extern "C" fn cc_status_message(status: CcStatus) -> *const c_char {
    let msg: &'static str = match status {
        CcStatus::Ok => "ok\0",
        CcStatus::ConfigError => "configuration error\0",
        CcStatus::RuntimeError => "runtime error\0",
        CcStatus::NullPointer => "null pointer argument\0",
        CcStatus::InvalidUtf8 => "invalid UTF-8 in argument\0",
    };
    msg.as_ptr() as *const c_char
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, CcStatus> {
    if ptr.is_null() {
        set_error("null pointer argument");
        return Err(CcStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        CcStatus::InvalidUtf8
    })
}

fn parse_mode(s: &str) -> Result<Mode, CcStatus> {
    match s {
        "run" => Ok(Mode::Run),
        "sweep-n" => Ok(Mode::SweepN),
        "scan-beta" => Ok(Mode::ScanBeta),
        "spectrum" => Ok(Mode::Spectrum),
        other => {
            set_error(format!("unknown mode '{other}' (run, sweep-n, scan-beta, spectrum)"));
            Err(CcStatus::ConfigError)
        }
    }
}

/// Parse a flat key=value configuration (or a manifest JSON) for the given
/// mode. Returns a handle to free with `cc_experiment_free`, or NULL with the
/// error available via `cc_last_error`.
///
/// # Safety
/// `mode` and `config_text` must be NUL-terminated strings valid for the
/// duration of the call, or NULL (NULL `config_text` means defaults only).
#[no_mangle]
pub unsafe extern "C" fn cc_experiment_parse(
    mode: *const c_char,
    config_text: *const c_char,
) -> *mut CcExperiment {
    let mode = match cstr_arg(mode).and_then(parse_mode) {
        Ok(m) => m,
        Err(_) => return std::ptr::null_mut(),
    };
    let text = if config_text.is_null() {
        ""
    } else {
        match cstr_arg(config_text) {
            Ok(t) => t,
            Err(_) => return std::ptr::null_mut(),
        }
    };
    let parsed = catch_unwind(AssertUnwindSafe(|| parse_config_text(mode, text, &[])));
    match parsed {
        Ok(Ok(spec)) => Box::into_raw(Box::new(CcExperiment { spec })),
        Ok(Err(e)) => {
            set_error(e.to_string());
            std::ptr::null_mut()
        }
        Err(_) => {
            set_error("internal panic during parse");
            std::ptr::null_mut()
        }
    }
}

/// Free a handle returned by `cc_experiment_parse`. NULL is a no-op.
///
/// # Safety
/// `handle` must be a pointer previously returned by `cc_experiment_parse`
/// and not freed since.
#[no_mangle]
pub unsafe extern "C" fn cc_experiment_free(handle: *mut CcExperiment) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Run the experiment's trials in memory and fill `out` with the aggregated
/// stability. Does not touch the filesystem.
///
/// # Safety
/// `handle` must be a live `cc_experiment_parse` result; `out` must point to
/// writable memory for one `CcStability`.
#[no_mangle]
pub unsafe extern "C" fn cc_experiment_stability(
    handle: *const CcExperiment,
    out: *mut CcStability,
) -> CcStatus {
    if handle.is_null() || out.is_null() {
        set_error("null pointer argument");
        return CcStatus::NullPointer;
    }
    let spec = &(*handle).spec;
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<CcStability, ClockError> {
        let runner = CascadeRunner::new(spec.cascade_config(false))?;
        let mut offsets = Vec::with_capacity(spec.trials as usize);
        let mut aborted = 0u64;
        for t in 0..spec.trials {
            match runner.run_trial(t) {
                Ok(r) => offsets.push(r.mean_frequency_offset),
                Err(_) => aborted += 1,
            }
        }
        let tau = spec.steps as f64 * spec.t1;
        let rep = analysis::stability(&offsets, aborted, spec.omega, tau, spec.noise.gamma)?;
        Ok(CcStability {
            sigma: rep.sigma,
            sigma_stderr: rep.sigma_stderr,
            figure_of_merit: rep.figure_of_merit,
            abort_rate: rep.abort_rate,
            trials_completed: rep.trials_completed,
            trials_aborted: rep.trials_aborted,
        })
    }));
    match result {
        Ok(Ok(stab)) => {
            *out = stab;
            CcStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic during run");
            CcStatus::RuntimeError
        }
    }
}

/// Mean frequency offset of a single trial (deterministic in the config seed
/// and `trial`).
///
/// # Safety
/// `handle` must be a live `cc_experiment_parse` result; `out` must point to
/// writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn cc_experiment_trial_offset(
    handle: *const CcExperiment,
    trial: u64,
    out: *mut f64,
) -> CcStatus {
    if handle.is_null() || out.is_null() {
        set_error("null pointer argument");
        return CcStatus::NullPointer;
    }
    let spec = &(*handle).spec;
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<f64, ClockError> {
        let runner = CascadeRunner::new(spec.cascade_config(false))?;
        Ok(runner.run_trial(trial)?.mean_frequency_offset)
    }));
    match result {
        Ok(Ok(v)) => {
            *out = v;
            CcStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic during trial");
            CcStatus::RuntimeError
        }
    }
}

/// Execute the experiment exactly as the CLI would, writing CSV outputs and
/// the manifest into `out_dir` (NULL keeps the configured directory).
///
/// # Safety
/// `handle` must be a live `cc_experiment_parse` result; `out_dir`, when not
/// NULL, must be a NUL-terminated path string.
#[no_mangle]
pub unsafe extern "C" fn cc_experiment_run(
    handle: *const CcExperiment,
    out_dir: *const c_char,
) -> CcStatus {
    if handle.is_null() {
        set_error("null pointer argument");
        return CcStatus::NullPointer;
    }
    let mut spec = (*handle).spec.clone();
    if !out_dir.is_null() {
        match cstr_arg(out_dir) {
            Ok(dir) => spec.out_dir = PathBuf::from(dir),
            Err(status) => return status,
        }
    }
    match catch_unwind(AssertUnwindSafe(|| run_experiment(&spec))) {
        Ok(Ok(_)) => CcStatus::Ok,
        Ok(Err(e)) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic during run");
            CcStatus::RuntimeError
        }
    }
}

/// Closed-form stability prediction for m cascaded ensembles of N atoms.
/// Returns NaN for invalid arguments.
#[no_mangle]
pub extern "C" fn cc_theory_stability(
    m: u32,
    n_atoms: u64,
    beta1: f64,
    beta: f64,
    gamma: f64,
    tau: f64,
    omega: f64,
) -> f64 {
    let positive = |v: f64| v.is_finite() && v > 0.0;
    if m < 1
        || n_atoms < 1
        || !positive(beta1)
        || !positive(beta)
        || !positive(gamma)
        || !positive(tau)
        || !positive(omega)
    {
        return f64::NAN;
    }
    analysis::theory_stability(m, n_atoms, beta1, beta, gamma, tau, omega)
}

/// Minimum ensemble size for a Ramsey-time factor `a` per stage at phase-jump
/// budget `beta`. Returns -1 for invalid arguments.
#[no_mangle]
pub extern "C" fn cc_min_atoms(a: f64, beta: f64) -> i64 {
    if a.is_nan() || a < 1.0 || beta.is_nan() || beta <= 0.0 {
        return -1;
    }
    analysis::min_atoms(a, beta) as i64
}
