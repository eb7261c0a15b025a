//! C ABI for the dualtask laboratory.
//!
//! Conventions:
//! - every fallible call returns a [`DtStatus`]; on failure a message is
//!   available from [`dt_last_error`] on the calling thread until the next
//!   failing call;
//! - objects are opaque handles created by `*_new`/`*_parse`/`dt_run_*` and
//!   released with the matching `*_free` (null is accepted and ignored);
//! - strings returned through `char **` are owned by the caller and must be
//!   released with [`dt_string_free`];
//! - output arrays are caller-allocated with the documented length.
//!
//! Panics never cross the boundary; they surface as [`DtStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dualtask::experiment::{
    compare_runs, parse_config, run_experiment, ExperimentConfig, ExperimentError, Metric,
    RunManifest,
};
use dualtask::telemetry::{
    categorize_motion, expected_step_cost, CostModel, MotionCategory, TelemetryError,
};
use dualtask::tensor::{streams, RngStream};
use dualtask::theory::{
    build_task_pair, closed_form_inner_product, simulate_mixture_gd, MixtureSpec, QuadTaskPair,
    TheoryError,
};
use dualtask::train::{combine_pcgrad, pcgrad_project, TrainError};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Domain = 4,
    Io = 5,
    Report = 6,
    Numerical = 7,
    Degenerate = 8,
    Invariant = 9,
    Internal = 10,
}

/// Motion bucket of a clip.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DtMotionCategory {
    Discarded = 0,
    Small = 1,
    Medium = 2,
    Large = 3,
}

/// Parsed experiment configuration.
pub struct DtConfig(ExperimentConfig);

/// Manifest of a finished run.
pub struct DtManifest(RunManifest);

/// Quadratic task pair.
pub struct DtTaskPair(QuadTaskPair);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(DtStatus, String);

impl<E: Into<ExperimentError>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        Failure(status_of(&e), e.to_string())
    }
}

fn status_of(e: &ExperimentError) -> DtStatus {
    match e {
        ExperimentError::Config(_) => DtStatus::Config,
        ExperimentError::Report(_) => DtStatus::Report,
        ExperimentError::Io(_) => DtStatus::Io,
        ExperimentError::Theory(t) => match t {
            TheoryError::Divergence { .. } => DtStatus::Numerical,
            TheoryError::DegenerateGradient => DtStatus::Degenerate,
            _ => DtStatus::Domain,
        },
        ExperimentError::Train(t) => match t {
            TrainError::Config(_) => DtStatus::Config,
            TrainError::Numerical { .. } => DtStatus::Numerical,
            TrainError::DegenerateGradient => DtStatus::Degenerate,
            TrainError::Invariant { .. } => DtStatus::Invariant,
            TrainError::Io(_) => DtStatus::Io,
            _ => DtStatus::Domain,
        },
        ExperimentError::Telemetry(TelemetryError::Io(_)) => DtStatus::Io,
        ExperimentError::Telemetry(TelemetryError::FrozenMeasurement(_)) => DtStatus::Invariant,
        _ => DtStatus::Domain,
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DtStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            DtStatus::Internal
        }
    }
}

fn null() -> Failure {
    Failure(DtStatus::NullPointer, "null pointer argument".into())
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(DtStatus::InvalidUtf8, "argument is not valid UTF-8".into()))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize) -> Result<&'a [f64], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_out<'a>(p: *mut f64, n: usize) -> Result<&'a mut [f64], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn write_out<T>(p: *mut T, v: T) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null());
    }
    p.write(v);
    Ok(())
}

fn owned_string(s: &str) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("interior nuls removed")
        .into_raw()
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn dt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn dt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer returned through a `char **` output of
/// this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a TOML experiment config (strict: unknown keys are errors).
///
/// # Safety
/// `text` must be a nul-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dt_config_parse(text: *const c_char, out: *mut *mut DtConfig) -> DtStatus {
    guard(|| {
        let cfg = parse_config(str_arg(text)?)?;
        write_out(out, Box::into_raw(Box::new(DtConfig(cfg))))
    })
}

/// Canonical TOML form of a config, as an owned string.
///
/// # Safety
/// `cfg` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dt_config_canonical(
    cfg: *const DtConfig,
    out: *mut *mut c_char,
) -> DtStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(null)?;
        write_out(out, owned_string(&cfg.0.canonical()))
    })
}

/// Overrides the first seed and the sweep size.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dt_config_set_seeds(
    cfg: *mut DtConfig,
    seed: u64,
    seeds: u64,
) -> DtStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(null)?;
        let mut next = cfg.0.clone();
        next.seed = seed;
        next.seeds = seeds;
        next.validate()?;
        cfg.0 = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn dt_config_free(cfg: *mut DtConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the configured experiment into `out_dir`. A run whose assertions
/// fail still returns `Ok` with a manifest; check `dt_manifest_exit_code`.
///
/// # Safety
/// `cfg` must be a live handle, `out_dir` a nul-terminated path and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dt_run_experiment(
    cfg: *const DtConfig,
    out_dir: *const c_char,
    out: *mut *mut DtManifest,
) -> DtStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(null)?;
        let m = run_experiment(&cfg.0, Path::new(str_arg(out_dir)?))?;
        write_out(out, Box::into_raw(Box::new(DtManifest(m))))
    })
}

/// Reads the manifest of a finished run (file or run directory).
///
/// # Safety
/// `path` must be a nul-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dt_manifest_read(
    path: *const c_char,
    out: *mut *mut DtManifest,
) -> DtStatus {
    guard(|| {
        let m = RunManifest::read(Path::new(str_arg(path)?))?;
        write_out(out, Box::into_raw(Box::new(DtManifest(m))))
    })
}

/// 0 when every assertion passed, 1 otherwise; -1 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dt_manifest_exit_code(m: *const DtManifest) -> c_int {
    m.as_ref().map_or(-1, |m| m.0.exit_code())
}

/// Number of failed assertions; 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dt_manifest_failure_count(m: *const DtManifest) -> usize {
    m.as_ref().map_or(0, |m| m.0.failures.len())
}

/// Recorded result value for `key` as an owned string; `Report` if absent.
///
/// # Safety
/// `m` must be a live handle, `key` nul-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dt_manifest_result(
    m: *const DtManifest,
    key: *const c_char,
    out: *mut *mut c_char,
) -> DtStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(null)?;
        let key = str_arg(key)?;
        let v =
            m.0.result(key)
                .ok_or_else(|| Failure(DtStatus::Report, format!("no result `{key}`")))?;
        write_out(out, owned_string(v))
    })
}

/// Full manifest text as an owned string.
///
/// # Safety
/// `m` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dt_manifest_text(m: *const DtManifest, out: *mut *mut c_char) -> DtStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(null)?;
        write_out(out, owned_string(&m.0.to_text()))
    })
}

/// # Safety
/// `m` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn dt_manifest_free(m: *mut DtManifest) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Mean over paired telemetry series of `metric(a) − metric(b)`, where
/// `metric` is `phi_final_band`, `norm_floor` or `trend`.
///
/// # Safety
/// String arguments must be nul-terminated; `mean_diff` valid.
#[no_mangle]
pub unsafe extern "C" fn dt_compare_runs(
    run_a: *const c_char,
    run_b: *const c_char,
    metric: *const c_char,
    mean_diff: *mut f64,
) -> DtStatus {
    guard(|| {
        let metric: Metric = str_arg(metric)?.parse()?;
        let r = compare_runs(
            Path::new(str_arg(run_a)?),
            Path::new(str_arg(run_b)?),
            metric,
        )?;
        write_out(mean_diff, r.mean_diff)
    })
}

/// Builds a task pair from `n` eigenvalues per task.
///
/// # Safety
/// `eig1` and `eig2` must point to `n` doubles; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dt_task_pair_new(
    eig1: *const f64,
    eig2: *const f64,
    n: usize,
    basis_seed: u64,
    perturbation_scale: f64,
    out: *mut *mut DtTaskPair,
) -> DtStatus {
    guard(|| {
        let pair = build_task_pair(
            slice_arg(eig1, n)?,
            slice_arg(eig2, n)?,
            basis_seed,
            perturbation_scale,
        )?;
        write_out(out, Box::into_raw(Box::new(DtTaskPair(pair))))
    })
}

/// # Safety
/// `pair` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn dt_task_pair_free(pair: *mut DtTaskPair) {
    if !pair.is_null() {
        drop(Box::from_raw(pair));
    }
}

/// Mixture gradient descent from `z0` (length = pair dimension). Writes
/// `steps + 1` inner products to `inner_out` and, if non-null, cosines to
/// `cosine_out`. `stochastic` non-zero switches tasks at random, seeded by
/// `seed`.
///
/// # Safety
/// `pair` must be live; `z0` must hold the pair dimension; output arrays
/// must hold `steps + 1` doubles.
#[no_mangle]
pub unsafe extern "C" fn dt_mixture_gd(
    pair: *const DtTaskPair,
    p: f64,
    eta: f64,
    z0: *const f64,
    steps: usize,
    stochastic: c_int,
    seed: u64,
    inner_out: *mut f64,
    cosine_out: *mut f64,
) -> DtStatus {
    guard(|| {
        let pair = &pair.as_ref().ok_or_else(null)?.0;
        let spec = MixtureSpec {
            p,
            eta,
            z0: slice_arg(z0, pair.dim())?.to_vec(),
            steps,
        };
        let mut rng = RngStream::new(seed, streams::TASK_SWITCH);
        let traj = simulate_mixture_gd(pair, &spec, stochastic != 0, &mut rng)?;
        slice_out(inner_out, steps + 1)?.copy_from_slice(&traj.inner_product);
        if !cosine_out.is_null() {
            slice_out(cosine_out, steps + 1)?.copy_from_slice(&traj.cosine);
        }
        Ok(())
    })
}

/// Closed-form inner product at step `t` for a commuting pair.
///
/// # Safety
/// `pair` must be live; `z0` must hold the pair dimension; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dt_closed_form_inner_product(
    pair: *const DtTaskPair,
    p: f64,
    eta: f64,
    z0: *const f64,
    t: usize,
    out: *mut f64,
) -> DtStatus {
    guard(|| {
        let pair = &pair.as_ref().ok_or_else(null)?.0;
        let spec = MixtureSpec {
            p,
            eta,
            z0: slice_arg(z0, pair.dim())?.to_vec(),
            steps: t,
        };
        write_out(out, closed_form_inner_product(pair, &spec, t)?)
    })
}

/// Video/image attention cost ratio `T²` and expected per-step cost.
///
/// # Safety
/// `ratio` and `expected` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dt_expected_step_cost(
    tokens_per_frame: usize,
    latent_frames: usize,
    p: f64,
    ratio: *mut f64,
    expected: *mut f64,
) -> DtStatus {
    guard(|| {
        let (r, e) = expected_step_cost(&CostModel {
            tokens_per_frame,
            latent_frames,
            p,
        })?;
        write_out(ratio, r)?;
        write_out(expected, e)
    })
}

/// Buckets a clip by foreground and background mean flow (pixels).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dt_categorize_motion(
    fg: f64,
    bg: f64,
    out: *mut DtMotionCategory,
) -> DtStatus {
    guard(|| {
        let c = match categorize_motion(fg, bg)? {
            MotionCategory::Discarded => DtMotionCategory::Discarded,
            MotionCategory::Small => DtMotionCategory::Small,
            MotionCategory::Medium => DtMotionCategory::Medium,
            MotionCategory::Large => DtMotionCategory::Large,
        };
        write_out(out, c)
    })
}

/// Projects each of two length-`n` gradients off the other when they
/// conflict.
///
/// # Safety
/// Inputs must hold `n` doubles; outputs must have room for `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dt_pcgrad_project(
    g1: *const f64,
    g2: *const f64,
    n: usize,
    out1: *mut f64,
    out2: *mut f64,
) -> DtStatus {
    guard(|| {
        let (a, b) = pcgrad_project(slice_arg(g1, n)?, slice_arg(g2, n)?)?;
        slice_out(out1, n)?.copy_from_slice(&a);
        slice_out(out2, n)?.copy_from_slice(&b);
        Ok(())
    })
}

/// `(1−p)·g̃_img + p·g̃_vid` after projection; `projected` (nullable) is set
/// to 1 when the pair conflicted.
///
/// # Safety
/// Inputs must hold `n` doubles; `out` must have room for `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dt_pcgrad_combine(
    g_img: *const f64,
    g_vid: *const f64,
    n: usize,
    p: f64,
    out: *mut f64,
    projected: *mut c_int,
) -> DtStatus {
    guard(|| {
        let (d, conflict) = combine_pcgrad(slice_arg(g_img, n)?, slice_arg(g_vid, n)?, p)?;
        slice_out(out, n)?.copy_from_slice(&d);
        if !projected.is_null() {
            projected.write(c_int::from(conflict));
        }
        Ok(())
    })
}
