use std::ffi::{c_char, c_int, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use dualtask_ffi::*;

fn last_error() -> String {
    let p = dt_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_string_lossy().into_owned();
    dt_string_free(s);
    out
}

#[test]
fn cost_and_categorizer() {
    let (mut r, mut e) = (0.0, 0.0);
    assert_eq!(
        unsafe { dt_expected_step_cost(16, 13, 0.2, &mut r, &mut e) },
        DtStatus::Ok
    );
    assert_eq!((r, e), (169.0, 34.6));
    assert_eq!(
        unsafe { dt_expected_step_cost(16, 13, 1.5, &mut r, &mut e) },
        DtStatus::Domain
    );
    assert!(last_error().contains("1.5"));
    let mut c = DtMotionCategory::Large;
    for (fg, bg, want) in [
        (25.0, 0.0, DtMotionCategory::Small),
        (30.0, 2.0, DtMotionCategory::Medium),
        (5.0, 12.0, DtMotionCategory::Discarded),
    ] {
        assert_eq!(
            unsafe { dt_categorize_motion(fg, bg, &mut c) },
            DtStatus::Ok
        );
        assert_eq!(c, want);
    }
    assert_eq!(
        unsafe { dt_categorize_motion(1.0, 1.0, ptr::null_mut()) },
        DtStatus::NullPointer
    );
}

#[test]
fn config_handles() {
    let bad = CString::new("kind = \"theory\"\nlearning_rat = 1\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { dt_config_parse(bad.as_ptr(), &mut cfg) },
        DtStatus::Config
    );
    assert!(last_error().contains("learning_rat"));
    assert!(cfg.is_null());
    let good = CString::new("kind = \"cost\"\n").unwrap();
    assert_eq!(
        unsafe { dt_config_parse(good.as_ptr(), &mut cfg) },
        DtStatus::Ok
    );
    assert_eq!(unsafe { dt_config_set_seeds(cfg, 9, 0) }, DtStatus::Config);
    assert_eq!(unsafe { dt_config_set_seeds(cfg, 9, 2) }, DtStatus::Ok);
    let mut text = ptr::null_mut();
    assert_eq!(unsafe { dt_config_canonical(cfg, &mut text) }, DtStatus::Ok);
    let text = unsafe { take(text) };
    assert!(text.contains("seed = 9") && text.contains("seeds = 2"));
    unsafe { dt_config_free(cfg) };
    unsafe { dt_config_free(ptr::null_mut()) };
}

#[test]
fn run_and_compare_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let text =
        CString::new("kind = \"train\"\nseeds = 1\n[train.switch]\nmax_steps = 40\ncadence = 10\n")
            .unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { dt_config_parse(text.as_ptr(), &mut cfg) },
        DtStatus::Ok
    );
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { dt_run_experiment(cfg, out.as_ptr(), &mut m) },
        DtStatus::Ok
    );
    assert_eq!(unsafe { dt_manifest_exit_code(m) }, 0);
    assert_eq!(unsafe { dt_manifest_failure_count(m) }, 0);
    let key = CString::new("seed_0.phi_band").unwrap();
    let mut v = ptr::null_mut();
    assert_eq!(
        unsafe { dt_manifest_result(m, key.as_ptr(), &mut v) },
        DtStatus::Ok
    );
    let band: f64 = unsafe { take(v) }.parse().unwrap();
    assert!((0.0..=1.0).contains(&band));
    let missing = CString::new("nope").unwrap();
    assert_eq!(
        unsafe { dt_manifest_result(m, missing.as_ptr(), &mut v) },
        DtStatus::Report
    );
    unsafe { dt_manifest_free(m) };

    let metric = CString::new("phi_final_band").unwrap();
    let mut diff = f64::NAN;
    assert_eq!(
        unsafe { dt_compare_runs(out.as_ptr(), out.as_ptr(), metric.as_ptr(), &mut diff) },
        DtStatus::Ok
    );
    assert_eq!(diff, 0.0);
    let bogus = CString::new("median").unwrap();
    assert_eq!(
        unsafe { dt_compare_runs(out.as_ptr(), out.as_ptr(), bogus.as_ptr(), &mut diff) },
        DtStatus::Config
    );
    let mut read = ptr::null_mut();
    assert_eq!(
        unsafe { dt_manifest_read(out.as_ptr(), &mut read) },
        DtStatus::Ok
    );
    assert_eq!(unsafe { dt_manifest_exit_code(read) }, 0);
    unsafe { dt_manifest_free(read) };
    assert_eq!(unsafe { dt_manifest_exit_code(ptr::null()) }, -1);
    unsafe { dt_config_free(cfg) };
}

#[test]
fn theory_and_pcgrad() {
    let mut pair = ptr::null_mut();
    let (e1, e2, z0) = ([2.0, 0.5], [1.0, 3.0], [1.0, -2.0]);
    assert_eq!(
        unsafe { dt_task_pair_new(e1.as_ptr(), e2.as_ptr(), 2, 5, 0.0, &mut pair) },
        DtStatus::Ok
    );
    let mut a = [0.0; 31];
    let mut phi = [0.0; 31];
    assert_eq!(
        unsafe {
            dt_mixture_gd(
                pair,
                0.2,
                0.1,
                z0.as_ptr(),
                30,
                0,
                0,
                a.as_mut_ptr(),
                phi.as_mut_ptr(),
            )
        },
        DtStatus::Ok
    );
    for (t, v) in a.iter().enumerate() {
        let mut cf = 0.0;
        assert_eq!(
            unsafe { dt_closed_form_inner_product(pair, 0.2, 0.1, z0.as_ptr(), t, &mut cf) },
            DtStatus::Ok
        );
        assert!((v - cf).abs() <= 1e-10 * cf.abs().max(1e-300));
    }
    assert_eq!(
        unsafe {
            dt_mixture_gd(
                pair,
                0.2,
                5.0,
                z0.as_ptr(),
                30,
                0,
                0,
                a.as_mut_ptr(),
                ptr::null_mut(),
            )
        },
        DtStatus::Domain
    );
    unsafe { dt_task_pair_free(pair) };
    let neg = [-1.0];
    assert_eq!(
        unsafe { dt_task_pair_new(neg.as_ptr(), neg.as_ptr(), 1, 0, 0.0, &mut pair) },
        DtStatus::Domain
    );

    let (g1, g2) = ([1.0, 0.0], [-1.0, 1.0]);
    let (mut o1, mut o2) = ([0.0; 2], [0.0; 2]);
    assert_eq!(
        unsafe {
            dt_pcgrad_project(
                g1.as_ptr(),
                g2.as_ptr(),
                2,
                o1.as_mut_ptr(),
                o2.as_mut_ptr(),
            )
        },
        DtStatus::Ok
    );
    assert!((o1[0] - 0.5).abs() < 1e-10 && (o1[1] - 0.5).abs() < 1e-10);
    let mut projected: c_int = 0;
    let mut d = [0.0; 2];
    assert_eq!(
        unsafe {
            dt_pcgrad_combine(
                g1.as_ptr(),
                g2.as_ptr(),
                2,
                0.2,
                d.as_mut_ptr(),
                &mut projected,
            )
        },
        DtStatus::Ok
    );
    assert_eq!(projected, 1);
    let zero = [0.0, 0.0];
    assert_eq!(
        unsafe {
            dt_pcgrad_project(
                zero.as_ptr(),
                g2.as_ptr(),
                2,
                o1.as_mut_ptr(),
                o2.as_mut_ptr(),
            )
        },
        DtStatus::Degenerate
    );
}

#[test]
fn header_declares_the_api() {
    let header =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dualtask.h"))
            .unwrap();
    for name in [
        "DT_STATUS_OK",
        "typedef struct DtConfig DtConfig",
        "dt_last_error",
        "dt_config_parse",
        "dt_run_experiment",
        "dt_manifest_free",
        "dt_mixture_gd",
        "dt_pcgrad_combine",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

/// Compiles and runs a C program against the header and the static library
/// when a C compiler and the archive are available.
#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir: PathBuf = exe.parent().and_then(Path::parent).unwrap().to_path_buf();
    let lib = profile_dir.join("libdualtask_ffi.a");
    if !lib.is_file() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: static library or C compiler unavailable");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
