use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn modvqa(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modvqa"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = modvqa(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A five-scene dataset small enough to train on in a second.
fn tiny_dataset(dir: &Path) -> PathBuf {
    ok(
        &["synth", "--kind", "mixed", "--scenes", "5", "--severities", "3", "--frames", "16", "--height", "48", "--width", "64", "--out", "ds", "--seed", "2"],
        dir,
    );
    dir.join("ds/manifest.csv")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = r#"{
        "model": {"m_keyframes": 2, "k_levels": 2, "rho_mode": "geometric", "base_size": 16,
                  "chunk_len": 4, "hv": 16, "wv": 16, "hidden_dim": 8,
                  "encoder_channels": [3, 4, 8], "subband_channels": [3, 4], "temporal_channels": [3, 4, 4]},
        "train": {"batch_size": 4, "lr": 0.003, "epochs": 2},
        "repeats": 2
    }"#;
    let path = dir.join("cfg.json");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn synth_writes_one_row_per_clip() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        &["synth", "--kind", "spatial", "--scenes", "24", "--severities", "5", "--frames", "2", "--height", "8", "--width", "8", "--out", "ds"],
        tmp.path(),
    );
    let manifest = std::fs::read_to_string(tmp.path().join("ds/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 120);
    assert!(tmp.path().join("ds/generator.json").exists());
}

#[test]
fn train_is_reproducible_and_eval_agrees() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(tmp.path());
    let cfg = tiny_config(tmp.path());
    let (m, c) = (manifest.to_str().unwrap(), cfg.to_str().unwrap());
    ok(&["train", "--manifest", m, "--config", c, "--seed", "7", "--out", "a"], tmp.path());
    ok(&["train", "--manifest", m, "--config", c, "--seed", "7", "--out", "b", "--workers", "1"], tmp.path());
    for r in ["repeat_00", "repeat_01"] {
        let la = std::fs::read(tmp.path().join("a").join(r).join("log.csv")).unwrap();
        let lb = std::fs::read(tmp.path().join("b").join(r).join("log.csv")).unwrap();
        assert_eq!(la, lb);
        let run: serde_json::Value =
            serde_json::from_slice(&std::fs::read(tmp.path().join("a").join(r).join("run.json")).unwrap()).unwrap();
        assert_eq!(run["manifest_sha256"].as_str().unwrap().len(), 64);
    }
    let trained = std::fs::read_to_string(tmp.path().join("a/report.csv")).unwrap();
    ok(&["eval", "--run", "a", "--manifest", m, "--out", "ev"], tmp.path());
    let evaluated = std::fs::read_to_string(tmp.path().join("ev/report.csv")).unwrap();
    assert_eq!(trained, evaluated);

    ok(&["eval", "--run", "a", "--manifest", m, "--run", "b", "--manifest", m, "--out", "both"], tmp.path());
    let weighted = std::fs::read_to_string(tmp.path().join("both/weighted.csv")).unwrap();
    assert!(weighted.starts_with("metric,q_b,q_s,q_t,q_st\nsrcc,"));

    let csv = ok(&["predict", "--run", "a/repeat_00", "--manifest", m], tmp.path());
    assert_eq!(csv.lines().next(), Some("clip_id,q_b,q_s,q_t,q_st"));
    assert_eq!(csv.lines().count(), 1 + 15);
}

#[test]
fn fresh_model_scores_are_all_equal() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_dataset(tmp.path());
    let cfg = tiny_config(tmp.path());
    ok(
        &["predict", "--config", cfg.to_str().unwrap(), "--clip", "ds/clips/scene001_sev2", "--out", "p.csv", "--seed", "5"],
        tmp.path(),
    );
    let csv = std::fs::read_to_string(tmp.path().join("p.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "scene001_sev2");
    assert!(row[2..].iter().all(|v| v == &row[1]), "{row:?}");
}

#[test]
fn pyramid_dumps_every_level() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_dataset(tmp.path());
    let out = ok(
        &["pyramid", "--clip", "ds/clips/scene000_sev0", "--frame", "3", "--levels", "3", "--rho", "1.5", "--out", "pyr"],
        tmp.path(),
    );
    assert!(out.contains("rho 1.5000"));
    for name in ["subband_0.png", "subband_1.png", "subband_2.png", "residual.png"] {
        assert!(tmp.path().join("pyr").join(name).exists(), "{name}");
    }
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| modvqa(args, tmp.path()).status.code().unwrap();

    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["train", "--manifest", "m.csv", "--out", "o", "--lr", "1", "--pretrained-lr"]), 1);
    std::fs::write(tmp.path().join("bad.json"), r#"{"train": {"lr": 0.1, "momentum": 0.9}}"#).unwrap();
    assert_eq!(code(&["train", "--manifest", "m.csv", "--out", "o", "--config", "bad.json"]), 1);
    assert_eq!(code(&["train", "--manifest", "missing.csv", "--out", "o"]), 2);
    assert_eq!(code(&["synth", "--scenes", "0", "--out", "ds0"]), 1);

    let manifest = tiny_dataset(tmp.path());
    let cfg = tiny_config(tmp.path());
    let out = modvqa(
        &["train", "--manifest", manifest.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--lr", "1e30", "--out", "blown"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().filter(|l| l.starts_with("error:")).count(), 1);
}
