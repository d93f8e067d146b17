//! End-to-end checks of the `bmc` binary: output formats and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn bmc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bmc"))
}

fn write_model(dir: &Path, name: &str, contents: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, contents).unwrap();
    path
}

fn reference_model(dir: &Path) -> std::path::PathBuf {
    write_model(
        dir,
        "model.json",
        r#"{
            "K": 3,
            "alpha": [0.15, 0.35, 0.5],
            "p": [[0.50, 0.20, 0.30], [0.10, 0.70, 0.20], [0.35, 0.05, 0.60]],
            "n": 60
        }"#,
    )
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

#[test]
fn info_reports_information_quantity_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let model = reference_model(dir.path());
    let out = run(bmc().arg("info").arg("--model").arg(&model));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let i = json["I"].as_f64().unwrap();
    assert!((i - 0.8796).abs() < 1e-3, "I = {i}");
    assert_eq!(json["zero_condition"]["holds"], serde_json::json!(false));
    assert!(json["pairwise"][0][0].is_null());
    assert!(json["pairwise"][2][0].as_f64().unwrap() > 0.0);
}

#[test]
fn invalid_model_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(
        dir.path(),
        "bad.json",
        r#"{ "K": 2, "alpha": [0.5, 0.6], "p": [[0.8, 0.2], [0.3, 0.7]] }"#,
    );
    let out = run(bmc().arg("info").arg("--model").arg(&model));
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("alpha"), "stderr: {stderr}");
}

#[test]
fn t_below_n_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = reference_model(dir.path());
    let out = run(bmc()
        .arg("cluster")
        .arg("--model")
        .arg(&model)
        .arg("--t")
        .arg("50")
        .arg("--out")
        .arg(dir.path().join("out")));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_then_cluster_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = reference_model(dir.path());
    let out_dir = dir.path().join("sim");
    let out = run(bmc()
        .arg("simulate")
        .arg("--model")
        .arg(&model)
        .arg("--t")
        .arg("2000")
        .arg("--seed")
        .arg("7")
        .arg("--out")
        .arg(&out_dir));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let traj = std::fs::read_to_string(out_dir.join("trajectory.txt")).unwrap();
    assert!(traj.starts_with("# n=60 T=2000 seed=7\n"));
    assert_eq!(traj.lines().count(), 2002);
    let counts = std::fs::read_to_string(out_dir.join("counts.csv")).unwrap();
    assert_eq!(counts.lines().count(), 60);

    // Feed the dump back through the clustering pipeline.
    let cl_dir = dir.path().join("cl");
    let out = run(bmc()
        .arg("cluster")
        .arg("--model")
        .arg(&model)
        .arg("--traj")
        .arg(out_dir.join("trajectory.txt"))
        .arg("--iters")
        .arg("2")
        .arg("--out")
        .arg(&cl_dir));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let partition = std::fs::read_to_string(cl_dir.join("partition.txt")).unwrap();
    assert_eq!(partition.lines().count(), 60);
    assert!(partition
        .lines()
        .all(|l| matches!(l, "0" | "1" | "2")));
    let sv = std::fs::read_to_string(cl_dir.join("singular_values.csv")).unwrap();
    assert!(sv.starts_with("index,sigma\n"));
}

#[test]
fn generated_cluster_prints_stage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = reference_model(dir.path());
    let out = run(bmc()
        .arg("cluster")
        .arg("--model")
        .arg(&model)
        .arg("--n")
        .arg("90")
        .arg("--t")
        .arg("4000")
        .arg("--iters")
        .arg("2")
        .arg("--method")
        .arg("kmeans")
        .arg("--out")
        .arg(dir.path().join("out")));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("spectral"), "stdout: {stdout}");
    assert!(stdout.contains("improve 2"), "stdout: {stdout}");
    let errors = std::fs::read_to_string(dir.path().join("out/errors.csv")).unwrap();
    assert!(errors.starts_with("stage,error_rate\n"));
    assert_eq!(errors.lines().count(), 4);
    let trace = std::fs::read_to_string(dir.path().join("out/trace.csv")).unwrap();
    assert!(trace.starts_with("iter,reassignments,error_rate\n"));
}

#[test]
fn raster_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bmc()
        .arg("raster")
        .arg("--resolution")
        .arg("6")
        .arg("--threshold")
        .arg("1.0")
        .arg("--out")
        .arg(dir.path()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("raster.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("p12,p21,I,feasible"));
    assert_eq!(lines.count(), 36);
}

#[test]
fn exp_spectral_writes_csv_and_plot_script() {
    let dir = tempfile::tempdir().unwrap();
    let model = reference_model(dir.path());
    let out_dir = dir.path().join("exp");
    let out = run(bmc()
        .arg("exp-spectral")
        .arg("--model")
        .arg(&model)
        .arg("--n-grid")
        .arg("40,60")
        .arg("--t-rule")
        .arg("nlogn2")
        .arg("--trials")
        .arg("2")
        .arg("--out")
        .arg(&out_dir));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_dir.join("spectral_error.csv")).unwrap();
    assert!(text.starts_with("# config="));
    assert!(out_dir.join("spectral_error.gp").exists());

    // Identical invocation reproduces identical bytes.
    let rerun_dir = dir.path().join("exp2");
    let out = run(bmc()
        .arg("exp-spectral")
        .arg("--model")
        .arg(&model)
        .arg("--n-grid")
        .arg("40,60")
        .arg("--t-rule")
        .arg("nlogn2")
        .arg("--trials")
        .arg("2")
        .arg("--out")
        .arg(&rerun_dir));
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(out_dir.join("spectral_error.csv")).unwrap(),
        std::fs::read(rerun_dir.join("spectral_error.csv")).unwrap()
    );
}
