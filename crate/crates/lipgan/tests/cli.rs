//! Black-box tests of the `lipgan` binary: spec validation, artifact layout,
//! exit codes, and the output-root override. Each test drives a separate
//! child process, so environment variables stay test-local.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lipgan"))
}

fn shipped_specs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs")
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("process not killed by signal")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// A spec small enough to train in well under a second.
fn tiny_spec(name: &str, iterations: u32, checks: &str) -> String {
    format!(
        r#"
version = 1
name = "{name}"
scenario = "toy2d"
checks = {checks}

[train]
iterations = {iterations}
batch_size = 4
d_learning_rate = 1e-3
eval_every = 30
estimate_samples = 8
seed = 0

[train.regularizer]
kind = "maxgp"
rho = 10.0
buffer_capacity = 8
"#
    )
}

#[test]
fn validate_accepts_the_shipped_specs() {
    let dir = shipped_specs_dir();
    let mut seen = 0;
    for entry in fs::read_dir(&dir).expect("specs directory") {
        let path = entry.expect("entry").path();
        if path.extension().is_none_or(|e| e != "toml") {
            continue;
        }
        seen += 1;
        let output = binary().arg("validate").arg(&path).output().expect("spawn");
        assert_eq!(
            exit_code(&output),
            0,
            "{} rejected: {}",
            path.display(),
            stderr(&output)
        );
        assert!(stdout(&output).starts_with("ok: "), "unexpected stdout: {}", stdout(&output));
    }
    assert!(seen >= 6, "expected the shipped spec files, found {seen}");
}

#[test]
fn validate_rejects_unknown_fields() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("bad.toml");
    fs::write(&path, tiny_spec("bad", 10, "[]").replace("[train]", "typo_field = 3\n[train]"))
        .expect("write");
    let output = binary().arg("validate").arg(&path).output().expect("spawn");
    assert_eq!(exit_code(&output), 1);
    assert!(stderr(&output).contains("error"), "stderr: {}", stderr(&output));
}

#[test]
fn missing_spec_file_is_a_usage_error() {
    let output = binary().arg("run").arg("/nonexistent/spec.toml").output().expect("spawn");
    assert_eq!(exit_code(&output), 1);
}

#[test]
fn run_writes_the_artifact_set_under_the_env_root() {
    let spec_dir = tempfile::tempdir().expect("tempdir");
    let out_root = tempfile::tempdir().expect("tempdir");
    let spec_path = spec_dir.path().join("tiny.toml");
    fs::write(&spec_path, tiny_spec("cli-tiny", 60, r#"["weak_duality"]"#)).expect("write");

    let output = binary()
        .arg("run")
        .arg(&spec_path)
        .env("LIPGAN_OUT", out_root.path())
        .output()
        .expect("spawn");
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr(&output));
    let text = stdout(&output);
    assert!(text.contains("check weak_duality: pass"), "stdout: {text}");
    assert!(text.contains("artifacts: "), "stdout: {text}");

    let run_dir = out_root.path().join("cli-tiny-seed0");
    for artifact in
        ["config.echo.json", "metrics.csv", "summary.json", "critic.txt", "field.csv", "field.svg"]
    {
        assert!(run_dir.join(artifact).is_file(), "missing {artifact} in {}", run_dir.display());
    }
}

#[test]
fn run_exits_three_when_a_check_fails() {
    let spec_dir = tempfile::tempdir().expect("tempdir");
    let out_root = tempfile::tempdir().expect("tempdir");
    let spec_path = spec_dir.path().join("short.toml");
    // Forty iterations cannot align the gradient field to 0.99 cosine.
    fs::write(&spec_path, tiny_spec("cli-short", 40, r#"["alignment"]"#)).expect("write");

    let output = binary()
        .arg("run")
        .arg(&spec_path)
        .env("LIPGAN_OUT", out_root.path())
        .output()
        .expect("spawn");
    assert_eq!(exit_code(&output), 3, "stdout: {}", stdout(&output));
    assert!(stdout(&output).contains("check alignment: FAIL"), "stdout: {}", stdout(&output));
}

#[test]
fn field_exports_a_grid_from_a_checkpoint() {
    let spec_dir = tempfile::tempdir().expect("tempdir");
    let out_root = tempfile::tempdir().expect("tempdir");
    let spec_path = spec_dir.path().join("tiny.toml");
    fs::write(&spec_path, tiny_spec("cli-field", 60, "[]")).expect("write");
    let run = binary()
        .arg("run")
        .arg(&spec_path)
        .env("LIPGAN_OUT", out_root.path())
        .output()
        .expect("spawn");
    assert_eq!(exit_code(&run), 0, "stderr: {}", stderr(&run));

    let checkpoint = out_root.path().join("cli-field-seed0/critic.txt");
    let csv_path = spec_dir.path().join("field.csv");
    let svg_path = spec_dir.path().join("field.svg");
    let output = binary()
        .arg("field")
        .arg(&checkpoint)
        .args(["--res", "5"])
        .args(["--box", "-1", "1", "-1", "1"])
        .arg("--out")
        .arg(&csv_path)
        .arg("--svg")
        .arg(&svg_path)
        .output()
        .expect("spawn");
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr(&output));

    let csv = fs::read_to_string(&csv_path).expect("csv");
    assert!(csv.starts_with("x1,x2,df_dx1,df_dx2,grad_norm"), "header: {csv}");
    assert_eq!(csv.lines().count(), 1 + 5 * 5, "one row per grid node");
    let svg = fs::read_to_string(&svg_path).expect("svg");
    assert!(svg.starts_with("<svg"), "svg prologue: {}", &svg[..svg.len().min(40)]);
}

#[test]
fn report_aggregates_run_directories() {
    let spec_dir = tempfile::tempdir().expect("tempdir");
    let out_root = tempfile::tempdir().expect("tempdir");
    for (name, seed) in [("cli-rep-a", 0), ("cli-rep-b", 0)] {
        let spec_path = spec_dir.path().join(format!("{name}.toml"));
        let text = tiny_spec(name, 60, r#"["weak_duality"]"#)
            .replace("seed = 0", &format!("seed = {seed}"));
        fs::write(&spec_path, text).expect("write");
        let run = binary()
            .arg("run")
            .arg(&spec_path)
            .env("LIPGAN_OUT", out_root.path())
            .output()
            .expect("spawn");
        assert_eq!(exit_code(&run), 0, "stderr: {}", stderr(&run));
    }

    let output = binary()
        .arg("report")
        .arg(out_root.path().join("cli-rep-a-seed0"))
        .arg(out_root.path().join("cli-rep-b-seed0"))
        .output()
        .expect("spawn");
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr(&output));
    let text = stdout(&output);
    let mut lines = text.lines();
    let header = lines.next().expect("header");
    assert!(header.starts_with("name,scenario,seed,variant"), "header: {header}");
    assert_eq!(lines.filter(|l| !l.is_empty()).count(), 2, "one row per run: {text}");
}
