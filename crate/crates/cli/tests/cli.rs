use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use gststream::circuits::{build_design, standard_fiducials_and_germs, ExperimentDesign};
use gststream::filter::Checkpoint;

const BIN: &str = env!("CARGO_BIN_EXE_gststream");

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--output-dir")
        .arg(dir)
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn prepare(dir: &Path, seed: &str) {
    ok(&["design", "--n", "1", "--max-power", "8", "--seed", seed], dir);
    ok(&["truth", "--seed", seed], dir);
    ok(&["sample", "--seed", seed], dir);
}

fn checkpoint(dir: &Path) -> Checkpoint {
    Checkpoint::from_json(&fs::read_to_string(dir.join("checkpoint.json")).unwrap()).unwrap()
}

#[test]
fn design_count_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["design", "--n", "1", "--max-power", "32"], dir.path());
    let text = fs::read_to_string(dir.path().join("design.jsonl")).unwrap();
    let read = ExperimentDesign::read_jsonl(text.as_bytes()).unwrap();
    let fg = standard_fiducials_and_germs(1).unwrap();
    let built = build_design(1, &fg, 32, 1000, 0).unwrap();
    assert_eq!(read.circuits.len(), built.circuits.len());
    assert_eq!(read.design_id, built.design_id);
}

#[test]
fn filter_reads_a_pipe() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "4");
    ok(&["filter"], dir.path());
    let from_file = checkpoint(dir.path());

    let mut child = Command::new(BIN)
        .args(["filter", "--observations", "-", "--output-dir"])
        .arg(dir.path())
        .stdin(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let data = fs::read(dir.path().join("observations.jsonl")).unwrap();
    let mut stdin = child.stdin.take().unwrap();
    for line in data.split_inclusive(|b| *b == b'\n') {
        stdin.write_all(line).unwrap();
    }
    drop(stdin);
    assert!(child.wait().unwrap().success());
    let from_pipe = checkpoint(dir.path());
    assert_eq!(from_file, from_pipe);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "5");
    ok(&["filter", "--update", "joseph"], dir.path());
    let full = checkpoint(dir.path());
    let full_log = fs::read_to_string(dir.path().join("states.jsonl")).unwrap();

    ok(
        &[
            "filter",
            "--update",
            "joseph",
            "--max-steps",
            "123",
            "--checkpoint-every",
            "10",
        ],
        dir.path(),
    );
    assert_eq!(checkpoint(dir.path()).k, 123);
    let cp = dir.path().join("checkpoint.json");
    ok(&["filter", "--resume", cp.to_str().unwrap()], dir.path());
    let resumed = checkpoint(dir.path());
    assert_eq!(resumed.k, full.k);
    for (a, b) in full
        .x_hat
        .iter()
        .chain(&full.p)
        .zip(resumed.x_hat.iter().chain(&resumed.p))
    {
        assert!((a - b).abs() <= 1e-12);
    }
    let log = fs::read_to_string(dir.path().join("states.jsonl")).unwrap();
    assert_eq!(log.lines().count(), full_log.lines().count());
    let updates = fs::read_to_string(dir.path().join("updates.csv")).unwrap();
    assert_eq!(updates.lines().count(), full.k + 1);
}

#[test]
fn resume_rejects_conflicting_flags() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "6");
    ok(&["filter", "--max-steps", "20"], dir.path());
    let cp = dir.path().join("checkpoint.json");
    let out = run(
        &["filter", "--resume", cp.to_str().unwrap(), "--update", "joseph"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupt_stream_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "7");
    let path = dir.path().join("observations.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[60] = lines[60].replacen("\"counts\":[", "\"counts\":[1,", 1);
    fs::write(&path, lines.join("\n") + "\n").unwrap();

    let out = run(&["filter", "--checkpoint-every", "25"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(checkpoint(dir.path()).k, 50);
    let updates = fs::read_to_string(dir.path().join("updates.csv")).unwrap();
    assert_eq!(updates.lines().count(), 51);
    assert!(!dir.path().join("checkpoint.json.tmp").exists());
}

#[test]
fn foreign_stream_is_rejected() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    prepare(a.path(), "1");
    ok(&["design", "--n", "1", "--max-power", "8", "--seed", "2"], b.path());
    let obs = a.path().join("observations.jsonl");
    let out = run(
        &["filter", "--rb-r", "0.01", "--observations", obs.to_str().unwrap()],
        b.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("design"));
    assert!(!b.path().join("checkpoint.json").exists());
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["design", "--max-power", "6"], dir.path()).status.code(), Some(1));
    assert!(!dir.path().join("design.jsonl").exists());
    assert_eq!(
        run(&["filter", "--covariance", "gaussian"], dir.path()).status.code(),
        Some(1)
    );
    assert_eq!(run(&["report", "--format", "png"], dir.path()).status.code(), Some(1));
    ok(&["design", "--max-power", "2"], dir.path());
    assert_eq!(
        run(&["truth", "--infidelity", "0.5"], dir.path()).status.code(),
        Some(1)
    );
    assert_eq!(
        run(&["truth", "--plant", "Gz:H:X=0.1"], dir.path()).status.code(),
        Some(1)
    );
    assert!(!dir.path().join("model.json").exists());
    assert_eq!(run(&["filter"], dir.path()).status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["design", "--max-power", "2"], dir.path());
    // a large stochastic rate has no CPTP completion once planted
    let out = run(&["truth", "--plant", "Gx:S:X=-0.5"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("model.json").exists());
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let status = |value: &str| {
        Command::new(BIN)
            .args(["design", "--max-power", "2", "--output-dir"])
            .arg(dir.path())
            .env("GSTSTREAM_THREADS", value)
            .output()
            .unwrap()
            .status
            .code()
    };
    assert_eq!(status("1"), Some(0));
    assert_eq!(status("many"), Some(1));
}

#[test]
fn report_without_truth_or_mle() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "8");
    ok(&["filter", "--track", "Gy:H:Y"], dir.path());
    fs::remove_file(dir.path().join("model.json")).unwrap();
    ok(&["report", "--format", "csv"], dir.path());
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "k,circuit_id,depth,mse,mae,trace_P,trace_sqrtP,Gy:H:Y,Gy:H:Y_sigma"
    );
    assert!(lines.next().unwrap().starts_with("0,,0,,,"));
    assert!(dir.path().join("trajectory_Gy_H_Y.csv").exists());
    assert!(!dir.path().join("plots").exists());
}

#[test]
fn help_exits_zero() {
    let out = Command::new(BIN).arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["design", "truth", "sample", "filter", "mle", "report", "run-all"] {
        assert!(text.contains(cmd));
    }
}
