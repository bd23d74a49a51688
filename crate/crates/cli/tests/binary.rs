use std::process::Command;

fn kvdirect() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_kvdirect"));
    c.env_clear();
    c
}

#[test]
fn passing_report_exits_zero() {
    let out = kvdirect().arg("memory").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["experiment"], "memory");
    assert_eq!(report["passed"], true);
    assert!(String::from_utf8_lossy(&out.stderr).contains("PASS published_rows_reproduced"));
}

#[test]
fn errors_exit_two_with_message() {
    let out = kvdirect().arg("load-weights").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--weights"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "budgetz = [1]\n").unwrap();
    let out = kvdirect()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("budgetz"));
}

#[test]
fn env_and_csv_and_out_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    let out = kvdirect()
        .args([
            "sweep",
            "--strategies",
            "kvdirect,window",
            "--n-new",
            "8",
            "--out",
        ])
        .arg(&path)
        .env("KVDIRECT_BUDGETS", "4,8")
        .env("KVDIRECT_FORMAT", "csv")
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out.stdout.is_empty());
    let mut rows = csv::Reader::from_path(&path).unwrap();
    assert_eq!(
        rows.headers().unwrap(),
        vec!["strategy", "family", "budget", "match", "mean_kl", "max_kl"]
    );
    assert_eq!(rows.records().count(), 4);
}

#[test]
fn weights_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.kvdw");
    let dump = kvdirect()
        .args(["dump-weights", "--seed", "3", "--out"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(dump.status.code(), Some(0));
    let dumped: serde_json::Value = serde_json::from_slice(&dump.stdout).unwrap();

    let load = kvdirect()
        .args(["load-weights", "--weights"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(load.status.code(), Some(0));
    let loaded: serde_json::Value = serde_json::from_slice(&load.stdout).unwrap();
    assert_eq!(loaded["weights_sha256"], dumped["results"]["sha256"]);
    assert_eq!(loaded["config"]["model"]["seed"], 3);
    assert_eq!(loaded["results"]["matches_seeded_init"], true);
}
