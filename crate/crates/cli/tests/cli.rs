use std::path::Path;
use std::process::Command;

fn gwbridge() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gwbridge"))
}

fn write_config(dir: &Path, workers: usize) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "experiment": "TrapScaling",
        "offspring": {"pmf": {"1": 0.5, "2": 0.5}},
        "n_grid": [20, 40],
        "replicas": 6,
        "master_seed": 7,
        "workers": workers,
    });
    let path = dir.join(format!("cfg{workers}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn run_is_byte_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for workers in [1, 3] {
        let cfg = write_config(tmp.path(), workers);
        let out = tmp.path().join(format!("out{workers}"));
        let status = gwbridge()
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        assert!(out.join("manifest.json").exists());
        csvs.push(std::fs::read(out.join("trap_scaling.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs.remove(0)).unwrap();
    assert!(text.starts_with("experiment,replica,n,k_or_L,stat,value,flag,seed,wall_ms\n"));
}

#[test]
fn seed_override_changes_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 2);
    let run = |seed: &str, dir: &str| {
        let out = tmp.path().join(dir);
        let ok = gwbridge()
            .args(["run", "--seed", seed, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(ok.success());
        std::fs::read(out.join("trap_scaling.csv")).unwrap()
    };
    assert_ne!(run("1", "a"), run("2", "b"));
}

#[test]
fn standard_config_round_trips_through_run() {
    let out = gwbridge()
        .args(["config", "case2_diagnostics"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let mut cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    cfg["n_grid"] = serde_json::json!([2, 3]);
    cfg["replicas"] = 2.into();
    cfg["params"]["brw_paths"] = 50.into();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c2.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let status = gwbridge()
        .args(["run", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(tmp.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(tmp.path().join("case2_diagnostics.csv").exists());
}

#[test]
fn invalid_config_exits_with_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"experiment":"TrapScaling","n_grid":[],"replicas":1,"master_seed":1}"#,
    )
    .unwrap();
    let out = gwbridge()
        .args(["run", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(!gwbridge()
        .args(["config", "nope"])
        .status()
        .unwrap()
        .success());
}

#[test]
fn quick_verify_passes() {
    let out = gwbridge().args(["verify", "--quick"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 11, "{text}");
    assert!(out.status.success(), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
}
