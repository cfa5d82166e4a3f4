use std::path::Path;
use std::process::{Command, Output};

fn leadrecon(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leadrecon"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = leadrecon(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

const STAGES: [&[&str]; 9] = [
    &["--seed", "7", "synth", "--classes", "3", "--patients", "20", "--records", "1"],
    &["--seed", "7", "preprocess"],
    &["--seed", "7", "split"],
    &["--seed", "7", "pretrain", "--epochs", "1"],
    &["--seed", "7", "embed"],
    &["--seed", "7", "train", "--epochs", "1"],
    &["--seed", "7", "reconstruct"],
    &["--seed", "7", "evaluate"],
    &["--seed", "7", "affinity"],
];

#[test]
fn pipeline_runs_end_to_end_and_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for stage in STAGES {
        ok(a.path(), stage);
    }
    for f in ["evaluation.json", "metrics.csv", "comparison.csv", "per_class.csv", "affinity_h.csv", "affinity_x.csv"] {
        assert!(a.path().join(f).exists(), "{f} missing");
    }
    for stage in ["synth", "preprocess", "split", "pretrain", "embed", "train", "reconstruct", "evaluate", "affinity"] {
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(a.path().join(format!("{stage}.manifest.json"))).unwrap())
                .unwrap();
        assert_eq!(m["command"], stage);
        assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    }
    let comparison = std::fs::read_to_string(a.path().join("comparison.csv")).unwrap();
    assert_eq!(comparison.lines().count(), 1 + 2 * 5);
    let affinity = std::fs::read_to_string(a.path().join("affinity_h.csv")).unwrap();
    assert_eq!(affinity.lines().next().unwrap(), "class,INVT,NORM,TALLR");
    assert!(a.path().join("reconstructed").read_dir().unwrap().count() > 0);

    for stage in &STAGES[..6] {
        ok(b.path(), stage);
    }
    for f in [
        "records_clean.f32",
        "segments_train.f32",
        "segments_test.manifest.json",
        "encoder.ckpt",
        "embeddings_val.f32",
        "decoder_V4.ckpt",
        "decoder_V4_clean.ckpt",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
}

#[test]
fn evaluate_without_checkpoints_is_a_dependency_error() {
    let d = tempfile::tempdir().unwrap();
    let o = leadrecon(d.path(), &["evaluate"]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error[dependency]:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn bad_config_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"pretrain": {"tau": "hot"}}"#).unwrap();
    let o = leadrecon(d.path(), &["--config", cfg.to_str().unwrap(), "split"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[config]:"));
    let o = leadrecon(d.path(), &["synth", "--classes", "9"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn preprocess_without_metadata_is_a_dependency_error() {
    let d = tempfile::tempdir().unwrap();
    let o = leadrecon(d.path(), &["preprocess", "--data", d.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}
