use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn clusterhom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clusterhom"))
        .args(args)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn identities_run_writes_report_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "id.json",
        r#"{"experiment": "identities", "k": 3, "samples": 4}"#,
    );
    let out = dir.path().join("out");
    let o = clusterhom(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.starts_with("PASS")));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("identities.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["passed"], true);
    assert_eq!(report["config"]["side"], 64.0);
    let csv: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "csv")
        .collect();
    assert!(!csv.is_empty());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.json",
        r#"{"experiment": "cm-verify", "p_grid": [0.5], "samples": 0}"#,
    );
    let o = clusterhom(&["validate", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("p_grid") && err.contains("samples"), "{err}");
    let cfg = write(
        dir.path(),
        "unknown.json",
        r#"{"experiment": "cm-verify", "sidee": 64}"#,
    );
    assert_eq!(clusterhom(&["validate", &cfg]).status.code(), Some(2));
}

#[test]
fn missing_config_exits_with_one() {
    assert_eq!(
        clusterhom(&["run", "/nonexistent/config.json"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn seed_table_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.json",
        r#"{"experiment": "cm-verify", "samples": 3, "master_seed": 9}"#,
    );
    let a = clusterhom(&["seeds", &cfg]);
    let b = clusterhom(&["seeds", &cfg]);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(text.lines().next(), Some("index,points,marks"));
}

#[test]
fn validate_echoes_resolved_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "v.json", r#"{"experiment": "remainder"}"#);
    let o = clusterhom(&["validate", &cfg]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["samples"], 32);
    assert_eq!(v["estimator"], "control-variate");
}
