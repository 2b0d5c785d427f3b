use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_formation");

fn oracle() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/synthetic_oracle.toml")
}

fn vessel() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/vessel_formation/scenario.toml")
}

fn formation(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("FORMATION_OUT_DIR")
        .output()
        .expect("spawn formation")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_run(dir: &Path) {
    let o = formation(&[
        "run",
        oracle().to_str().unwrap(),
        "--override",
        "run.t_end=0.05",
        "--override",
        "run.log_stride=5",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn shipped_scenarios_validate() {
    for s in [oracle(), vessel()] {
        let o = formation(&["validate", s.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}: {}", s.display(), stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok: 4096 neurons"));
    }
}

#[test]
fn invalid_scenario_lists_every_problem() {
    let o = formation(&[
        "validate",
        oracle().to_str().unwrap(),
        "--override",
        "controller.h1=[-1.0, 5.0, 5.0]",
        "--override",
        "topology.edges=[[1, 2, 1.0], [3, 4, 1.0]]",
    ]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("2 problems"), "{err}");
    assert!(err.contains("topology: leader connectivity"), "{err}");
    assert!(err.contains("controller.h1 (agent 1)"), "{err}");
}

#[test]
fn unknown_key_is_rejected() {
    let o = formation(&["validate", oracle().to_str().unwrap(), "--override", "run.dtt=0.1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_file_is_an_io_failure() {
    let o = formation(&["validate", "/definitely/not/here.toml"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn short_run_writes_outputs_and_analyze_flags_empty_windows() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("tiny");
    let o = formation(&[
        "run",
        oracle().to_str().unwrap(),
        "--override",
        "run.t_end=0.01",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["log.csv", "weights.csv", "metadata.json"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(dir.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2);

    let o = formation(&["analyze", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert!(report["empty_windows"].as_str().unwrap().contains("too few samples"));
    assert!(report["report"].is_null());
}

#[test]
fn analyze_writes_metrics_for_a_long_enough_run() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("run");
    let o = formation(&[
        "run",
        oracle().to_str().unwrap(),
        "--override",
        "run.t_end=1.0",
        "--override",
        "run.log_stride=10",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = tmp.path().join("report");
    let o = formation(&["analyze", dir.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let ids: Vec<&str> = stdout
        .lines()
        .filter_map(|l| l.strip_prefix("criterion "))
        .map(|l| l.split(' ').next().unwrap())
        .collect();
    assert_eq!(ids, ["1", "2", "3", "4", "5", "7", "9"], "{stdout}");
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("section,agent,channel,metric,value"));
}

#[test]
fn analyze_rejects_a_tampered_log() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("tiny");
    tiny_run(&dir);
    let path = dir.join("log.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let rest = lines[3].split_once(',').unwrap().1.to_string();
    lines[3] = format!("-1.0,{rest}");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let o = formation(&["analyze", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn analyze_of_missing_directory_is_an_io_failure() {
    let tmp = TempDir::new().unwrap();
    let o = formation(&["analyze", tmp.path().join("absent").to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn coarse_step_diverges_with_exit_three() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("div");
    let o = formation(&[
        "run",
        vessel().to_str().unwrap(),
        "--override",
        "run.dt=0.05",
        "--override",
        "run.t_end=20",
        "--override",
        "run.log_stride=1",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("metadata.json")).unwrap()).unwrap();
    assert!(meta["divergence"]["t"].as_f64().unwrap() < 20.0);
}

#[test]
fn environment_sets_the_output_directory() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("from_env");
    let o = Command::new(BIN)
        .args(["run", oracle().to_str().unwrap(), "--override", "run.t_end=0.01"])
        .env("FORMATION_OUT_DIR", &dir)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.join("log.csv").is_file());

    let flag = tmp.path().join("from_flag");
    let o = Command::new(BIN)
        .args(["run", oracle().to_str().unwrap(), "--override", "run.t_end=0.01"])
        .args(["--out", flag.to_str().unwrap()])
        .env("FORMATION_OUT_DIR", &dir)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(flag.join("log.csv").is_file());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    tiny_run(&a);
    tiny_run(&b);
    for f in ["log.csv", "weights.csv", "metadata.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}
