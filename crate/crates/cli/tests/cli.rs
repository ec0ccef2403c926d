use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wavesense(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wavesense"))
        .env("WAVESENSE_ROOT", root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL_MODEL: &[&str] = &[
    "--set",
    "model.features.mrcnn.small_branch.filters=8",
    "--set",
    "model.features.mrcnn.large_branch.filters=8",
    "--set",
    "model.features.afr.reduce_channels=8",
    "--set",
    "model.features.afr.se_reduction=4",
];

fn synth(root: &Path) {
    ok(&wavesense(root, &["synth", "--out", "data", "--subjects", "3", "--epochs", "16", "--seed", "7"]));
}

fn train(root: &Path, out: &str, seed: &str) {
    let mut args = vec![
        "train", "--data", "data", "--out", out, "--fold", "0", "--seed", seed, "--max-epochs", "2", "--batch-size", "8",
        "--window-len", "1",
    ];
    args.extend_from_slice(SMALL_MODEL);
    ok(&wavesense(root, &args));
}

#[test]
fn synth_writes_dataset_events_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let data = dir.path().join("data");
    for f in ["manifest.json", "events.jsonl", "run.json", "S00.signal.f32", "S02.labels.u8"] {
        assert!(data.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read(data.join("S01.labels.u8")).unwrap().len(), 16);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "synth");
    assert_eq!(run["config"]["synth"]["seed"], 7);
}

#[test]
fn training_is_reproducible_and_explain_matches_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root);
    train(root, "a", "1");
    train(root, "b", "1");
    let a = fs::read(root.join("a/model.ckpt")).unwrap();
    assert_eq!(a, fs::read(root.join("b/model.ckpt")).unwrap());
    assert!(root.join("a/train.jsonl").exists());

    ok(&wavesense(root, &["eval", "--ckpt", "a/model.ckpt", "--data", "data", "--part", "all", "--out", "eval"]));
    let preds = fs::read_to_string(root.join("eval/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 48);
    let first: serde_json::Value = serde_json::from_str(preds.lines().next().unwrap()).unwrap();
    let window = format!("{}:{}", first["window"]["subject_id"].as_str().unwrap(), first["window"]["epoch_index"]);
    assert!(root.join("eval/metrics.csv").exists());

    ok(&wavesense(root, &["explain", "--ckpt", "a/model.ckpt", "--data", "data", "--window", &window, "--out", "ex"]));
    let stem = window.replace(':', "_");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join(format!("ex/{stem}.json"))).unwrap()).unwrap();
    let logits: Vec<f64> = first["prediction"]["logits"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let contrib = report["contributions"].as_array().unwrap();
    for (c, logit) in logits.iter().enumerate() {
        let sum: f64 = contrib.iter().map(|row| row[c].as_f64().unwrap()).sum::<f64>() + report["bias"][c].as_f64().unwrap();
        assert!((sum - logit).abs() < 1e-6, "stage {c}: {sum} vs {logit}");
    }
}

#[test]
fn interpretation_commands_produce_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root);
    train(root, "m1", "1");
    train(root, "m2", "2");
    let cards = ok(&wavesense(root, &["cards", "--ckpt", "m1/model.ckpt", "--data", "data", "--out", "cards", "--update-ckpt"]));
    assert!(cards.contains("prototype 0"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("cards/cards.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 8);
    assert!(root.join("cards/occlusion.csv").exists());

    ok(&wavesense(root, &["errors", "--ckpt", "m1/model.ckpt", "--data", "data", "--out", "err"]));
    assert!(fs::read_to_string(root.join("err/error_scores.csv")).unwrap().starts_with("stage,group"));

    ok(&wavesense(root, &["export-scores", "--ckpt", "m1/model.ckpt", "--data", "data", "--out", "sc"]));
    let first = fs::read(root.join("sc/scores.csv")).unwrap();
    ok(&wavesense(root, &["export-scores", "--ckpt", "m1/model.ckpt", "--data", "data", "--out", "sc"]));
    assert_eq!(first, fs::read(root.join("sc/scores.csv")).unwrap());
    assert_eq!(String::from_utf8(first).unwrap().lines().count(), 17);

    let single = ok(&wavesense(root, &["ensemble", "--member", "m1/model.ckpt", "--data", "data"]));
    let member = ok(&wavesense(root, &["eval", "--ckpt", "m1/model.ckpt", "--data", "data"]));
    assert_eq!(single, member);
    ok(&wavesense(root, &["ensemble", "--member", "m1/model.ckpt,m2/model.ckpt", "--data", "data", "--out", "ens"]));
    assert!(root.join("ens/ensemble.json").exists());
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("run.toml"), "[synth]\nsubjects = 2\nepochs_per_subject = 5\nseed = 3\n").unwrap();
    ok(&wavesense(root, &["--config", "run.toml", "synth", "--out", "d", "--epochs", "4"]));
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("d/run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["synth"]["subjects"], 2);
    assert_eq!(run["config"]["synth"]["epochs_per_subject"], 4);
    assert_eq!(fs::read(root.join("d/S01.labels.u8")).unwrap().len(), 4);
}

#[test]
fn exit_codes_follow_error_categories() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(wavesense(root, &["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(wavesense(root, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(wavesense(root, &["synth", "--out", "d", "--subjects", "0"]).status.code(), Some(3));
    assert_eq!(wavesense(root, &["--set", "nonsense", "synth", "--out", "d"]).status.code(), Some(3));
    assert_eq!(wavesense(root, &["eval", "--ckpt", "missing.ckpt", "--data", "d"]).status.code(), Some(6));
    fs::write(root.join("junk.ckpt"), b"not a checkpoint\n").unwrap();
    assert_eq!(wavesense(root, &["eval", "--ckpt", "junk.ckpt", "--data", "d"]).status.code(), Some(4));
    synth(root);
    let folds = wavesense(root, &["train", "--data", "data", "--out", "t", "--folds", "1", "--window-len", "1"]);
    assert_eq!(folds.status.code(), Some(3));
}
