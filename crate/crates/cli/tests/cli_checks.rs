//! End-to-end checks of the `sharpen` binary: exit codes, report output,
//! environment configuration and fixture substitution.

use std::process::{Command, Output};

fn sharpen(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sharpen"));
    cmd.args(args);
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn bundled_fixtures_verify_cleanly() {
    let out = run_ok(&mut sharpen(&["verify"]));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("all 12 checks passed"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn perturbed_fixture_fails_only_the_pinned_regressions() {
    // Nudge the root branch of t1 from (0.6, 0.4) to (0.599, 0.401). The
    // model stays perfectly valid, so identity checks must keep passing
    // while the pinned t1 numbers fail.
    let mut model: serde_json::Value =
        serde_json::from_str(sharpen_core::toy::builtin_json("t1").unwrap()).unwrap();
    let rows = model["prompts"]["q0"].as_array_mut().unwrap();
    let root = rows
        .iter_mut()
        .find(|r| r["prefix"].as_array().unwrap().is_empty())
        .unwrap();
    root["probs"][0] = serde_json::json!(0.599);
    root["probs"][1] = serde_json::json!(0.401);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t1_perturbed.json");
    std::fs::write(&path, serde_json::to_string(&model).unwrap()).unwrap();

    let out = sharpen(&["verify", "--t1", path.to_str().unwrap()])
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    let marginal_row = text
        .lines()
        .find(|l| l.contains("t1 answer marginal regression"))
        .expect("row present");
    assert!(marginal_row.starts_with("FAIL"), "{marginal_row}");
    let identity_row = text
        .lines()
        .find(|l| l.contains("sharpening identity"))
        .expect("row present");
    assert!(identity_row.starts_with("pass"), "{identity_row}");
}

#[test]
fn missing_fixture_file_is_a_clear_error() {
    let out = sharpen(&["verify", "--t1", "/nonexistent/model.json"])
        .output()
        .expect("binary runs");
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fixture t1"), "{err}");
}

#[test]
fn repeated_runs_differ_only_in_wall_time() {
    let args = ["run", "--trials", "30", "--K", "2", "--L", "16", "--seed", "9"];
    let mut a = stdout_json(&run_ok(&mut sharpen(&args)));
    let mut b = stdout_json(&run_ok(&mut sharpen(&args)));
    for v in [&mut a, &mut b] {
        for report in v.as_array_mut().unwrap() {
            report.as_object_mut().unwrap().remove("wall_ms");
        }
    }
    assert_eq!(a, b);
}

#[test]
fn environment_variables_configure_the_run_but_flags_win() {
    let out = run_ok(sharpen(&["run", "--K", "1", "--L", "8"]).env("SHARPEN_TRIALS", "7"));
    assert_eq!(stdout_json(&out)[0]["trials"], 7);

    let out = run_ok(
        sharpen(&["run", "--K", "1", "--L", "8", "--trials", "9"]).env("SHARPEN_TRIALS", "7"),
    );
    assert_eq!(stdout_json(&out)[0]["trials"], 9);
}

#[test]
fn out_directory_receives_reports_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("results");
    let out = run_ok(&mut sharpen(&[
        "run",
        "--model",
        "t2",
        "--K",
        "1,2",
        "--trials",
        "10",
        "--L",
        "16",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("wrote 2 reports"), "{text}");

    for name in ["run_000.json", "run_001.json"] {
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join(name)).unwrap()).unwrap();
        assert_eq!(report["model"], "t2");
        assert_eq!(report["trials"], 10);
    }
    let csv = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.contains("method"), "{header}");
    assert!(header.contains("argmax_answer"), "{header}");
    assert_eq!(lines.count(), 2, "one row per report");
}

#[test]
fn length_sweep_reports_every_factorization_cell() {
    let out = run_ok(&mut sharpen(&[
        "run",
        "--ks-budget",
        "4",
        "--trials",
        "5",
        "--L",
        "16",
    ]));
    let v = stdout_json(&out);
    let combos: Vec<(u64, u64)> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["k"].as_u64().unwrap(), r["s"].as_u64().unwrap()))
        .collect();
    assert_eq!(combos, vec![(1, 4), (2, 2), (4, 1)]);
}

#[test]
fn invalid_configurations_are_rejected_with_context() {
    let out = sharpen(&["run", "--method", "joint-exact"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--alpha"));

    let out = sharpen(&["run", "--method", "temperature", "--K", "1,2"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweeps"));
}

#[test]
fn unreachable_server_is_a_diagnostic_not_a_hang() {
    let out = sharpen(&["run", "--server", "http://127.0.0.1:9", "--trials", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("connecting to http://127.0.0.1:9"), "{err}");
}
