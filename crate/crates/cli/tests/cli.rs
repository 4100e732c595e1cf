//! End-to-end checks of the `fjdgd` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const QUADRATIC: &str = "algorithm = fj_dgd_2
lambda = 0.5
alpha = safe
iterations = 60
[topology]
kind = ring
agents = 3
[data]
kind = quadratic
[attack]
malicious = [2]
eta = 1
kappa = 1
clip = 0.1
[seeds]
data = 5
attack = 6
";

const SMALL_SYNTHETIC: &str = "algorithm = fj_dgd_2
lambda = 0.25
alpha = safe
iterations = 40
record_every = 5
[topology]
kind = ring
agents = 4
[data]
kind = synthetic_federated
dim = 5
train = 60
test = 20
";

fn fjdgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fjdgd")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn run_writes_all_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.conf", SMALL_SYNTHETIC);
    let out = tmp.path().join("run");
    ok(&fjdgd(&["run", "--config", p(&cfg), "--out", p(&out), "--checkpoint"]));
    for f in ["config.resolved", "certificate.json", "trace.csv", "summary.json", "state.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    // Iterations 0, 5, ..., 40 for 4 agents, plus the header.
    assert_eq!(trace.lines().count(), 1 + 9 * 4);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["algorithm"], "fj_dgd_2");
    assert_eq!(summary["final"]["iteration"], 40);
    let acc = summary["final"]["metrics"]["local_test_acc"]["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn zero_iterations_records_the_initial_state_only() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.conf", &SMALL_SYNTHETIC.replace("iterations = 40", "iterations = 0"));
    let out = tmp.path().join("run");
    ok(&fjdgd(&["run", "--config", p(&cfg), "--out", p(&out)]));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4);
    assert!(trace.lines().skip(1).all(|l| l.starts_with("0,")));
}

#[test]
fn non_empty_output_needs_force() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.conf", SMALL_SYNTHETIC);
    let out = tmp.path().join("run");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let refused = fjdgd(&["run", "--config", p(&cfg), "--out", p(&out)]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    assert!(!out.join("trace.csv").exists());
    ok(&fjdgd(&["run", "--config", p(&cfg), "--out", p(&out), "--force"]));
    assert!(out.join("trace.csv").is_file());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "q.conf", QUADRATIC);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&fjdgd(&["--threads", "1", "run", "--config", p(&cfg), "--out", p(&a)]));
    ok(&fjdgd(&["--threads", "3", "run", "--config", p(&cfg), "--out", p(&b)]));
    for f in ["trace.csv", "summary.json", "config.resolved"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.conf", SMALL_SYNTHETIC);
    let out = tmp.path().join("sweep");
    ok(&fjdgd(&["sweep", "--config", p(&cfg), "--param", "lambda", "--values", "0,0.5,1", "--out", p(&out)]));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("value,iteration,agents,"));
    let width = lines[0].split(',').count();
    for (line, v) in lines[1..].iter().zip(["0", "0.5", "1"]) {
        assert_eq!(line.split(',').count(), width);
        assert!(line.starts_with(&format!("{v},40,4,")));
    }
    for d in ["lambda_0", "lambda_0.5", "lambda_1"] {
        assert!(out.join(d).join("trace.csv").is_file());
    }
}

#[test]
fn gen_data_exports_datasets() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.conf", SMALL_SYNTHETIC);
    let out = tmp.path().join("data");
    ok(&fjdgd(&["gen-data", "--config", p(&cfg), "--out", p(&out)]));
    assert!(fs::read_to_string(out.join("graph.txt")).unwrap().lines().filter(|l| !l.starts_with('#')).count() >= 4);
    let train = fs::read_to_string(out.join("agent_3_train.csv")).unwrap();
    assert!(train.lines().filter(|l| !l.is_empty()).count() >= 60);
    assert_eq!(fs::read_to_string(out.join("mixing.csv")).unwrap().lines().count(), 4);
}

#[test]
fn analyze_requires_a_trace() {
    let tmp = TempDir::new().unwrap();
    let out = fjdgd(&["analyze", p(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("trace.csv"));
}

fn bounds(dir: &Path) -> Vec<(f64, f64, f64)> {
    fs::read_to_string(dir.join("bounds.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|s| s.parse().unwrap()).collect();
            (v[1], v[2], v[3])
        })
        .collect()
}

#[test]
fn analyze_writes_fixed_points_and_envelope() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "q.conf", QUADRATIC);
    let run = tmp.path().join("run");
    ok(&fjdgd(&["run", "--config", p(&cfg), "--out", p(&run)]));
    ok(&fjdgd(&["analyze", p(&run)]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("fixed_points.json")).unwrap()).unwrap();
    assert_eq!(report["x_hat"].as_array().unwrap().len(), 3);
    let rows = bounds(&run);
    assert_eq!(rows.len(), 61);
    let (d_last, env_last, _) = rows[60];
    assert!(d_last <= env_last, "{d_last} > {env_last}");
    for (k, (d, _, stacked)) in rows.iter().enumerate() {
        assert!(d <= stacked, "iteration {k}: {d} > {stacked}");
    }
    // A second analyze refuses to overwrite without --force.
    assert!(!fjdgd(&["analyze", p(&run)]).status.success());
    ok(&fjdgd(&["analyze", p(&run), "--force"]));
}

#[test]
fn without_stubbornness_the_fixed_point_is_dgd() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "q.conf", &QUADRATIC.replace("lambda = 0.5", "lambda = 0"));
    let run = tmp.path().join("run");
    ok(&fjdgd(&["run", "--config", p(&cfg), "--out", p(&run)]));
    ok(&fjdgd(&["analyze", p(&run)]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("fixed_points.json")).unwrap()).unwrap();
    assert_eq!(report["x_hat"], report["x_bar"]);
}

#[test]
fn bad_config_reports_the_line() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.conf", "algorithm = dgd\nfrobnicate = 3\n");
    let out = fjdgd(&["run", "--config", p(&cfg), "--out", p(&tmp.path().join("r"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
}
