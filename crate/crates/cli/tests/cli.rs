use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn qbsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qbsde")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes `text` to a config file inside `dir`.
fn cfg(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn shipped(name: &str) -> String {
    fs::read_to_string(configs().join(name)).unwrap()
}

#[test]
fn zero_paths_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = shipped("heat.cfg").replace("mc.paths = 100000", "mc.paths = 0");
    let o = qbsde(&["run", &cfg(dir.path(), &text)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("numerics.mc.paths"), "{}", stderr(&o));

    let heat = configs().join("heat.cfg");
    let o = qbsde(&["run", heat.to_str().unwrap(), "--paths", "0", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn missing_horizon_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let text = shipped("lqr_delta0.cfg").replace("T = 1\n", "");
    let o = qbsde(&["run", &cfg(dir.path(), &text)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("problem.T"), "{}", stderr(&o));
}

#[test]
fn bad_expression_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let text = shipped("heat.cfg").replace("sigma = 1\n", "sigma = 1+\n");
    let o = qbsde(&["check-condition", &cfg(dir.path(), &text)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 6, column"), "{}", stderr(&o));
}

#[test]
fn all_errors_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let text = shipped("heat.cfg").replace("T = 1\n", "").replace("mc.steps = 64", "mc.steps = 64\nmc.colour = red");
    let o = qbsde(&["run", &cfg(dir.path(), &text)]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("problem.T") && err.contains("numerics.mc.colour"), "{err}");
}

#[test]
fn unreadable_file_is_a_configuration_error() {
    let o = qbsde(&["run", "/nonexistent/run.cfg"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn heat_run_passes_and_writes_identical_tables() {
    let heat = configs().join("heat.cfg");
    let run = |dir: &Path| {
        let o = qbsde(&["run", heat.to_str().unwrap(), "--paths", "20000", "--steps", "32", "--out-dir", dir.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("overall: PASS"));
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path());
    run(b.path());
    for name in ["values.csv", "checks.csv", "summary.txt", "bsde_lsmc_direct.csv", "pde_initial.csv"] {
        let (x, y) = (fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn failing_criteria_exit_one_with_summary_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    // a wrong reference value cannot be matched
    let text = shipped("heat.cfg").replace("fault_size = 0.1", "fault_size = 0.1\nreference = 2");
    let o = qbsde(&["run", &cfg(dir.path(), &text), "--paths", "5000", "--steps", "16", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("overall: FAIL"), "{}", stderr(&o));
}

#[test]
fn check_condition_exit_codes() {
    let out = tempfile::tempdir().unwrap();
    for (name, expected) in [("condition_perturbed.cfg", 0), ("condition_lambda_zero.cfg", 0), ("condition_vanishing_h.cfg", 1)] {
        let p = configs().join(name);
        let o = qbsde(&["check-condition", p.to_str().unwrap(), "--out-dir", out.path().to_str().unwrap()]);
        assert_eq!(code(&o), expected, "{name}: {}", stderr(&o));
        assert!(out.path().join("condition.txt").exists());
    }
}

#[test]
fn sweep_verb_needs_a_control_problem() {
    let heat = configs().join("heat.cfg");
    let out = tempfile::tempdir().unwrap();
    let o = qbsde(&["sweep", heat.to_str().unwrap(), "--out-dir", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
