use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn daestruct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daestruct")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is a JSON report")
}

#[test]
fn analyze_example4() {
    let f = fixture("example4.dae");
    let out = daestruct(&["analyze", f.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["schema"], "daestruct-report/1");
    assert_eq!(v["status"], "analyzed");
    assert_eq!(v["structure"]["c"], serde_json::json!([0, 1]));
    assert_eq!(v["structure"]["d"], serde_json::json!([1, 1]));
    assert_eq!(v["degeneration"], "degenerate-everywhere");
    let comps = v["components"].as_array().unwrap();
    assert!(!comps.is_empty());
    assert!(comps.iter().all(|c| c["method"] == "regularized via IIR"));
}

#[test]
fn solve_beam_writes_one_csv_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture("beam.dae");
    let out = daestruct(&["solve", f.to_str().unwrap(), "--seed", "7", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["status"], "solved");
    let methods: Vec<&str> = v["components"].as_array().unwrap().iter().map(|c| c["method"].as_str().unwrap()).collect();
    assert_eq!(methods.len(), 2);
    assert!(methods.contains(&"direct") && methods.contains(&"regularized via IIR"), "{methods:?}");
    for k in 0..2 {
        let csv = std::fs::read_to_string(dir.path().join(format!("beam.p{k}.csv"))).unwrap();
        let header = csv.lines().next().unwrap();
        assert!(header.starts_with("t,"), "{header}");
        assert!(csv.lines().count() > 1000);
    }
}

#[test]
fn report_flag_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let f = fixture("example4.dae");
    let out = daestruct(&["analyze", f.to_str().unwrap(), "--report", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(v["input"], "example4.dae");
}

#[test]
fn parse_error_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.dae");
    std::fs::write(&path, "var x\nx' + = 0\n").unwrap();
    let out = daestruct(&["analyze", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(json(&out)["status"], "parse-failed");
    assert!(!out.stderr.is_empty());
}

#[test]
fn usage_errors_exit_5() {
    assert_eq!(daestruct(&["analyze"]).status.code(), Some(5));
    assert_eq!(daestruct(&["frobnicate"]).status.code(), Some(5));
    assert_eq!(daestruct(&["analyze", "/nonexistent/file.dae"]).status.code(), Some(5));
}

#[test]
fn structural_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sing.dae");
    // y appears in no equation: no perfect matching
    std::fs::write(&path, "var x, y\nx' - x = 0\nx - 1 = 0\n").unwrap();
    let out = daestruct(&["analyze", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["status"], "structure-failed");
}

#[test]
fn output_is_deterministic() {
    let f = fixture("beam.dae");
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let out = daestruct(&["solve", f.to_str().unwrap(), "--seed", "7", "--h", "0.01", "--out", dir.path().to_str().unwrap()]);
        let csv = std::fs::read(dir.path().join("beam.p0.csv")).unwrap();
        (out.stdout, csv)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}
