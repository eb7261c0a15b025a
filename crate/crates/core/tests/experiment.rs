use std::path::Path;
use std::process::Command;

use dualtask::experiment::{
    compare_runs, parse_config, run_experiment, ExperimentError, Metric, RunManifest, OUT_ROOT_ENV,
};

fn read_column(path: &Path, name: &str) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let col = lines
        .next()
        .unwrap()
        .split(',')
        .position(|c| c == name)
        .unwrap();
    lines
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn theory_csv_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config("kind = \"theory\"\n[theory]\nsteps = 200\n").unwrap();
    let m = run_experiment(&cfg, dir.path()).unwrap();
    assert!(m.passed(), "{:?}", m.failures);
    // 1-D case: lambda1 = 2, lambda2 = 1, p = 0.2, eta = 0.1, z0 = 1, so
    // mu = 1.8 and A_t = 2 * 0.82^(2t).
    let a = read_column(&dir.path().join("trajectory.csv"), "A");
    assert_eq!(a.len(), 201);
    for (t, v) in a.iter().enumerate() {
        let expected = 2.0 * 0.82f64.powi(2 * t as i32);
        assert!((v - expected).abs() <= 1e-10 * expected, "t = {t}");
    }
    assert!(m.verify(dir.path()).unwrap().is_empty());
}

#[test]
fn cost_manifest_records_expected_cost() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config("kind = \"cost\"\n").unwrap();
    let m = run_experiment(&cfg, dir.path()).unwrap();
    assert!(m.passed());
    assert_eq!(m.result("expected_cost"), Some("34.6"));
    assert_eq!(m.result("cost_ratio"), Some("169.0"));
    let reread = RunManifest::read(dir.path()).unwrap();
    assert_eq!(reread.result("expected_cost"), Some("34.6"));
    assert_eq!(parse_config(&reread.config).unwrap(), cfg);
}

#[test]
fn forced_failure_is_named_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config("kind = \"cost\"\nforce_failure = true\n").unwrap();
    let m = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(m.exit_code(), 1);
    assert!(m.failures[0].starts_with("forced_failure"));
    let text = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(text.contains("status failed") && text.contains("failure forced_failure"));
}

#[test]
fn identical_configs_give_identical_telemetry_and_compare_to_zero() {
    let text = "kind = \"train\"\nseeds = 2\n[train.switch]\nmax_steps = 40\ncadence = 10\n";
    let cfg = parse_config(text).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = run_experiment(&cfg, a.path()).unwrap();
    let mb = run_experiment(&cfg, b.path()).unwrap();
    assert!(ma.passed() && mb.passed());
    let telemetry = |m: &RunManifest| -> Vec<_> {
        m.artifacts
            .iter()
            .filter(|x| x.path.ends_with("telemetry.csv"))
            .cloned()
            .collect()
    };
    assert_eq!(telemetry(&ma).len(), 2);
    assert_eq!(telemetry(&ma), telemetry(&mb));
    assert_eq!(ma.artifacts, mb.artifacts);
    for metric in [Metric::PhiFinalBand, Metric::NormFloor, Metric::Trend] {
        let r = compare_runs(a.path(), b.path(), metric).unwrap();
        assert_eq!(r.pairs.len(), 2);
        assert!(r.pairs.iter().all(|p| p.diff == 0.0));
    }
}

#[test]
fn short_runs_cannot_be_compared() {
    let cfg =
        parse_config("kind = \"train\"\nseeds = 1\n[train.switch]\nmax_steps = 20\ncadence = 10\n")
            .unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, dir.path()).unwrap();
    let err = compare_runs(dir.path(), dir.path(), Metric::PhiFinalBand).unwrap_err();
    assert!(matches!(err, ExperimentError::Report(m) if m.contains("insufficient")));
    let theory = tempfile::tempdir().unwrap();
    run_experiment(&parse_config("").unwrap(), theory.path()).unwrap();
    assert!(matches!(
        compare_runs(theory.path(), theory.path(), Metric::Trend),
        Err(ExperimentError::Report(_))
    ));
}

#[test]
fn motion_cat_labels_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("flow.csv");
    std::fs::write(&input, "25,0\n30,2\n5,12\n80,1\n").unwrap();
    let cfg = parse_config(&format!(
        "kind = \"motion_cat\"\n[motion_cat]\ninput = {:?}\n",
        input.to_str().unwrap()
    ))
    .unwrap();
    let out = dir.path().join("run");
    let m = run_experiment(&cfg, &out).unwrap();
    let labels = std::fs::read_to_string(out.join("labels.txt")).unwrap();
    assert_eq!(labels, "small\nmedium\ndiscarded\nlarge\n");
    assert_eq!(m.result("count.small"), Some("1"));
}

fn dualtask() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualtask"))
}

#[test]
fn cli_exit_codes_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dualtask()
        .args(["cost", "--seed", "3", "--out"])
        .arg(dir.path().join("c"))
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let m = RunManifest::read(&dir.path().join("c")).unwrap();
    assert_eq!(parse_config(&m.config).unwrap().seed, 3);

    let fixture = dir.path().join("fail.toml");
    std::fs::write(&fixture, "force_failure = true\n").unwrap();
    let failed = dualtask()
        .args(["cost", "--config"])
        .arg(&fixture)
        .arg("--out")
        .arg(dir.path().join("f"))
        .output()
        .unwrap();
    assert_eq!(failed.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&failed.stderr).contains("forced_failure"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "p = 1.5\n").unwrap();
    let err = dualtask()
        .args(["theory", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(err.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&err.stderr).contains("p = 1.5"));

    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "[train.opt]\nlearning_rate = 0.1\n").unwrap();
    let err = dualtask()
        .args(["train", "--config"])
        .arg(&typo)
        .output()
        .unwrap();
    assert_eq!(err.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&err.stderr).contains("learning_rate"));
}

#[test]
fn cli_output_root_from_environment() {
    let root = tempfile::tempdir().unwrap();
    let status = dualtask()
        .args(["theory", "--seed", "4"])
        .env(OUT_ROOT_ENV, root.path())
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(root.path().join("theory-4").join("manifest.txt").is_file());
}

#[test]
fn cli_motion_filter_and_compare() {
    use std::io::Write;
    let mut child = dualtask()
        .arg("motion-cat")
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"25,0\n30,2\n\n5,12\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "small\nmedium\ndiscarded\n"
    );

    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("t");
    let cfg = dir.path().join("t.toml");
    std::fs::write(
        &cfg,
        "seeds = 1\n[train.switch]\nmax_steps = 40\ncadence = 10\n",
    )
    .unwrap();
    assert!(dualtask()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap()
        .status
        .success());
    let cmp = dualtask()
        .arg("compare")
        .arg(&run)
        .arg(run.join("manifest.txt"))
        .args(["--metric", "norm_floor"])
        .output()
        .unwrap();
    assert!(cmp.status.success());
    assert!(String::from_utf8_lossy(&cmp.stdout).contains("mean diff +0.000000"));
}
