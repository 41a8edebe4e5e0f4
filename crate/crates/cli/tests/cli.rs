use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn telos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_telos")).args(args).output().expect("binary runs")
}

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name).display().to_string()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn run(name: &str, out: &Path, seed: Option<&str>) -> Output {
    let s = scenario(name);
    let mut args = vec!["run", "--scenario", s.as_str(), "--out", out.to_str().unwrap()];
    if let Some(seed) = seed {
        args.extend(["--seed", seed]);
    }
    telos(&args)
}

#[test]
fn reference_run_writes_four_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("reference.toml", dir.path(), None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.json", "rounds.csv", "ledger.txt", "trace.txt"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let r = report(dir.path());
    assert_eq!(r["sovereignty_violations"], 0);
    assert!(r["tool_version"].is_string());
    let csv = fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    assert!(csv.starts_with("round,"));
    assert_eq!(csv.lines().count(), 6);

    let ledger = dir.path().join("ledger.txt");
    let verify = telos(&["ledger", "verify", ledger.to_str().unwrap()]);
    assert_eq!(verify.status.code(), Some(0));
}

#[test]
fn fault_injection_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("fault_injection.toml", dir.path(), None);
    assert_eq!(out.status.code(), Some(3));
    let r = report(dir.path());
    assert!(r["sovereignty_violations"].as_u64().unwrap() >= 1);
    let trace = fs::read_to_string(dir.path().join("trace.txt")).unwrap();
    assert!(trace.lines().any(|l| l.contains(" block ") && l.contains("raw-telemetry")));
}

#[test]
fn seed_override_changes_digest() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    run("reference.toml", a.path(), None);
    run("reference.toml", b.path(), None);
    run("reference.toml", c.path(), Some("99"));
    assert_eq!(report(a.path())["report_digest"], report(b.path())["report_digest"]);
    assert_ne!(report(a.path())["report_digest"], report(c.path())["report_digest"]);
    assert_eq!(report(c.path())["seed"], 99);
}

#[test]
fn tampered_ledger_prints_index() {
    let dir = tempfile::tempdir().unwrap();
    run("reference.toml", dir.path(), None);
    let path = dir.path().join("ledger.txt");
    let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    // Flip one hex digit of entry 7's payload digest.
    let mut fields: Vec<String> = lines[7].split(' ').map(String::from).collect();
    let first = fields[3].remove(0);
    fields[3].insert(0, if first == '0' { '1' } else { '0' });
    lines[7] = fields.join(" ");
    let tampered = dir.path().join("tampered.txt");
    fs::write(&tampered, lines.join("\n") + "\n").unwrap();
    let out = telos(&["ledger", "verify", tampered.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("first bad entry: 7"));
}

#[test]
fn empty_ledger_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.txt");
    fs::write(&path, "").unwrap();
    assert_eq!(telos(&["ledger", "verify", path.to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn missing_ledger_is_runtime_failure() {
    assert_eq!(telos(&["ledger", "verify", "/nonexistent/ledger.txt"]).status.code(), Some(2));
}

#[test]
fn invalid_scenario_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("reference.toml")).unwrap().replace("id = \"south\"", "id = \"north\"");
    let path: PathBuf = dir.path().join("dup.toml");
    fs::write(&path, text).unwrap();
    let out = telos(&["validate", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("operators[2].id") && err.contains("north"), "{err}");

    let ok = telos(&["validate", "--scenario", &scenario("reference.toml")]);
    assert_eq!(ok.status.code(), Some(0));
}

#[test]
fn certify_reference_and_adversarial() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let ok = telos(&["certify", "--kind", "anomaly-detector", "--out", out_dir]);
    assert_eq!(ok.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("certification.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["verdicts"].as_array().unwrap().len(), 5);

    let bad = telos(&["certify", "--kind", "always-flag-detector", "--out", out_dir]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL  behavioral-benchmark"));

    assert_eq!(telos(&["certify", "--kind", "oracle", "--out", out_dir]).status.code(), Some(1));
}

#[test]
fn certify_with_params_file() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.toml");
    fs::write(&params, "horizon = 12\nalpha = 0.6\n").unwrap();
    let out = telos(&[
        "certify",
        "--kind",
        "capacity-forecaster",
        "--params",
        params.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    fs::write(&params, "horizon = \"soon\"\n").unwrap();
    let bad = telos(&["certify", "--kind", "capacity-forecaster", "--params", params.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn help_on_every_command() {
    for args in [vec!["--help"], vec!["run", "--help"], vec!["ledger", "verify", "--help"], vec!["certify", "--help"], vec!["validate", "--help"]] {
        let out = telos(&args);
        assert_eq!(out.status.code(), Some(0));
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}
