use std::process::Command;

fn airex(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_airex")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(airex(&["--help"]).status.code(), Some(0));
    assert_eq!(airex(&["--version"]).status.code(), Some(0));
    assert_eq!(airex(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(airex(&["train"]).status.code(), Some(2));
    let out = airex(&["stats", "--data-dir", "/nonexistent/airex", "--out", "/tmp/airex-never.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn gen_data_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = airex(&["gen-data", "--out", d, "--n-cities", "2", "--stations-per-city", "3", "--hours", "12", "--window", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stats = dir.path().join("stats.csv");
    let out = airex(&["stats", "--data-dir", d, "--out", stats.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&stats).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 3);
}
