use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cimlite(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cimlite"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .env("CIMLITE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_line(out: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    serde_json::from_str(lines[0]).expect("error line is JSON")
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.json");
    let cfg = serde_json::json!({
        "synth": { "patches": 800 },
        "ssl": { "iterations": 4, "batch_size": 16 },
        "train": { "epochs": 3 },
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_dataset_sidecar_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(&cimlite(dir.path(), &["gen-data", "--config", s(&cfg), "--seed", "3"]));
    for f in ["dataset.mpxd", "dataset.mpxd.json", "gen-data.manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("gen-data.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["synth"]["patches"], 800);
    let first = std::fs::read(dir.path().join("dataset.mpxd")).unwrap();
    ok(&cimlite(dir.path(), &["gen-data", "--config", s(&cfg), "--seed", "3"]));
    assert_eq!(first, std::fs::read(dir.path().join("dataset.mpxd")).unwrap());
}

#[test]
fn missing_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = cimlite(dir.path(), &["pretrain", "--dataset", "/nonexistent/data.mpxd"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["code"], 2);
}

#[test]
fn invalid_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"no_such_field": 1}"#).unwrap();
    let out = cimlite(dir.path(), &["gen-data", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "json");

    let cfg = small_config(dir.path());
    let out = cimlite(dir.path(), &["gen-data", "--config", s(&cfg), "--markers", "18"]);
    assert_eq!(out.status.code(), Some(3));
    let out = cimlite(dir.path(), &["pretrain"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(&cimlite(dir.path(), &["gen-data", "--config", s(&cfg)]));
    let hot = dir.path().join("hot.json");
    let json = serde_json::json!({
        "synth": { "patches": 800 },
        "ssl": { "iterations": 6, "batch_size": 16, "lars": { "lr": 1e300, "adaptation": false } },
    });
    std::fs::write(&hot, json.to_string()).unwrap();
    let data = dir.path().join("dataset.mpxd");
    let out = cimlite(dir.path(), &["pretrain", "--config", s(&hot), "--dataset", s(&data)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_line(&out)["error"], "numeric");
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = cimlite(dir.path(), &["grad-check", "--seed", "1"]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().find(|l| l.starts_with("max relative error")).unwrap();
    let value: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(value < 1e-4);
    let csv = std::fs::read_to_string(dir.path().join("grad_check.csv")).unwrap();
    assert!(csv.lines().count() > 30);
}

#[test]
fn thread_variable_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cimlite"))
        .args(["gen-data", "--out-dir", s(dir.path())])
        .env("CIMLITE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

fn pipeline(dir: &Path) {
    let cfg = small_config(dir);
    let c = s(&cfg);
    ok(&cimlite(dir, &["gen-data", "--config", c]));
    let data = dir.join("dataset.mpxd");
    let d = s(&data);
    ok(&cimlite(dir, &["pretrain", "--config", c, "--dataset", d]));
    ok(&cimlite(dir, &["pretrain", "--config", c, "--dataset", d, "--arch", "baseline", "--objective", "vicreg"]));
    let cim = dir.join("cim_ssl.cimw");
    let base = dir.join("baseline_ssl.cimw");
    ok(&cimlite(dir, &["linear-eval", "--config", c, "--dataset", d, "--weights", s(&cim)]));
    ok(&cimlite(dir, &["linear-eval", "--config", c, "--dataset", d, "--weights", s(&base)]));
    ok(&cimlite(dir, &["explain", "--config", c, "--dataset", d, "--weights", s(&cim)]));
    ok(&cimlite(dir, &["phenotype", "--config", c, "--dataset", d, "--weights", s(&cim)]));
    let cim_rep = format!("CIM-S={}", s(&dir.join("cim_ssl_linear_report.json")));
    let base_rep = format!("baseline={}", s(&dir.join("baseline_ssl_linear_report.json")));
    ok(&cimlite(dir, &["report", "--config", c, &cim_rep, &base_rep]));
}

const ARTIFACTS: [&str; 12] = [
    "dataset.mpxd",
    "cim_ssl.cimw",
    "cim_ssl_loss.csv",
    "baseline_ssl.cimw",
    "cim_ssl_linear_report.json",
    "baseline_ssl_linear_recall.csv",
    "relevance.rlvm",
    "explain_summary.json",
    "phenotypes.csv",
    "phenotype_summary.json",
    "comparison.txt",
    "recall_comparison.csv",
];

#[test]
fn full_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in ARTIFACTS {
        let x = std::fs::read(a.path().join(f)).unwrap_or_else(|_| panic!("{f} missing"));
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
    for cmd in ["gen-data", "pretrain", "linear-eval", "explain", "phenotype", "report"] {
        assert!(a.path().join(format!("{cmd}.manifest.json")).exists());
    }
    let csv = std::fs::read_to_string(a.path().join("phenotypes.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "patch_id,x,y,B,T,Tumor,Myeloid,Endothelial,Mast,phenotype,margin,tie_flag");
    let table = std::fs::read_to_string(a.path().join("comparison.txt")).unwrap();
    assert!(table.contains("CIM-S") && table.contains("baseline"));
}

#[test]
fn train_sup_writes_weights_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(&cimlite(dir.path(), &["gen-data", "--config", s(&cfg)]));
    let data = dir.path().join("dataset.mpxd");
    ok(&cimlite(dir.path(), &["train-sup", "--config", s(&cfg), "--dataset", s(&data)]));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("cim_sup_report.json")).unwrap()).unwrap();
    assert!(report["balanced_accuracy"].as_f64().unwrap() > 0.0);
    assert!(dir.path().join("cim_sup.cimw").exists());
    assert!(dir.path().join("cim_sup.model.json").exists());
}
