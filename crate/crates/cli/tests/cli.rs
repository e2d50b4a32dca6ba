use std::path::PathBuf;
use std::process::Command;

fn fedsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
}

fn repo_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn simulate_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = fedsim()
        .args(["simulate", "--config"])
        .arg(repo_file("configs/desk/fedadavr_adagrad.json"))
        .arg("--out")
        .arg(&out)
        .args(["--workers", "2"])
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("round,strategy,train_loss,eval_loss,eval_accuracy,grad_norm_sq,r_norm,table_bytes,participants\n"));
    assert_eq!(csv.lines().count(), 101);
    assert!(out.join("summary.json").exists());
}

#[test]
fn workers_env_fallback_gives_same_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for w in ["1", "4"] {
        let out = dir.path().join(w);
        let status = fedsim()
            .env("FEDSIM_WORKERS", w)
            .args(["simulate", "--config"])
            .arg(repo_file("configs/desk/fedavg.json"))
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        outputs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn bound_prints_report() {
    let out = fedsim().arg("bound").arg("--params").arg(repo_file("configs/bound_example.json")).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["a1"].as_f64().unwrap() > 0.0);
    assert_eq!(v["a_terms_checked"], false);
}

#[test]
fn partition_report_lists_every_client() {
    let out = fedsim()
        .arg("partition-report")
        .arg("--config")
        .arg(repo_file("configs/desk/fedavg.json"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 50);
    // LQ-1: one non-zero class per client
    for r in rows {
        let cells: Vec<usize> = r.split(',').skip(1).map(|c| c.parse().unwrap()).collect();
        let (classes, total) = cells.split_at(10);
        assert_eq!(classes.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(total[0], 20);
    }
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"model": {"kind": "linear_softmax"}}"#).unwrap();
    let out = fedsim().arg("simulate").arg("--config").arg(&path).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
