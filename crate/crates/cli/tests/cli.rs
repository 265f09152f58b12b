use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vocalburst::model::read_checkpoint;

const SMALL_CONFIG: &str = r#"
seed = 3

[synth]
train = 16
val = 8
test = 8
duration_s = 0.5

[features]
n_mels = 32

[train]
steps = 20
batch_size = 8
"#;

fn bin(root: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vocalburst"))
        .env("VOCALBURST_OUT", root)
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    let config = dir.path().join("config.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    (dir, root, config)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn evaluate_on_perfect_predictions() {
    let (dir, root, config) = setup();
    let manifest = dir.path().join("labels.csv");
    let mut text = String::from("id,path,split,age,country");
    for i in 0..10 {
        text.push_str(&format!(",e_{i}"));
    }
    text.push('\n');
    let mut preds = String::from("id,age");
    for i in 0..10 {
        preds.push_str(&format!(",e_{i}"));
    }
    preds.push_str(",p_0,p_1,p_2,p_3\n");
    let countries = ["US", "CN", "ZA", "VE"];
    for n in 0..8 {
        let emo: Vec<String> = (0..10).map(|d| format!("{}", ((n * 3 + d) % 10) as f64 / 10.0)).collect();
        let age = 20.0 + 5.0 * n as f64;
        text.push_str(&format!("u{n},a.wav,val,{age},{},{}\n", countries[n % 4], emo.join(",")));
        let probs: Vec<&str> = (0..4).map(|k| if k == n % 4 { "1" } else { "0" }).collect();
        preds.push_str(&format!("u{n},{age},{},{}\n", emo.join(","), probs.join(",")));
    }
    std::fs::write(&manifest, text).unwrap();
    let pred_file = dir.path().join("preds.csv");
    std::fs::write(&pred_file, preds).unwrap();
    let report = dir.path().join("report.txt");
    let stdout = ok(bin(
        &root,
        &config,
        &["evaluate", "--predictions", s(&pred_file), "--labels", s(&manifest), "--out", s(&report)],
    ));
    assert!(stdout.contains("uar=1.000000"), "{stdout}");
    assert!(stdout.contains("mae=0.000000"));
    assert!(stdout.contains("ccc_mean=1.000000"));
    assert!(stdout.contains("s_mtl=undefined"));
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().next(), Some("n=8"));
    let log = std::fs::read_to_string(root.join("runs.log")).unwrap();
    assert!(log.starts_with("stage=evaluate seed=3 config_sha256="));
    assert!(log.trim_end().ends_with("status=ok"));
}

#[test]
fn strf_features_train_with_learnable_rates_and_scales() {
    let (_dir, root, config) = setup();
    ok(bin(&root, &config, &["synth"]));
    ok(bin(&root, &config, &["preprocess"]));
    let index = ok(bin(&root, &config, &["featurize", "--frontend", "strf"]));
    assert!(index.trim().ends_with("features/strf/features.json"));
    let stdout = ok(bin(
        &root,
        &config,
        &["train", "--features", index.trim(), "--steps", "3", "--out", s(&root.join("strf_model"))],
    ));
    assert!(stdout.contains("final step 3"));
    let (model, meta) = read_checkpoint::<f64>(&root.join("strf_model").join("model.vbck")).unwrap();
    assert_eq!(meta.frontend, "strf");
    assert!(model.registry.contains("strf.rates"));
    assert!(model.registry.contains("strf.scales"));
    assert_eq!(model.registry.get("strf.rates").unwrap().len(), 8);
}

fn full_pipeline(root: &Path, config: &Path) -> Vec<u8> {
    ok(bin(root, config, &["synth"]));
    ok(bin(root, config, &["preprocess"]));
    ok(bin(root, config, &["featurize"]));
    ok(bin(root, config, &["train"]));
    let ckpt = root.join("models/logmel_all");
    let val = root.join("preds/val.csv");
    let test = root.join("preds/test.csv");
    ok(bin(root, config, &["predict", "--checkpoint", s(&ckpt), "--split", "val", "--out", s(&val)]));
    ok(bin(root, config, &["predict", "--checkpoint", s(&ckpt), "--split", "test", "--out", s(&test)]));
    std::fs::read(&test).unwrap()
}

#[test]
fn end_to_end_on_synthetic_corpus() {
    let (_dir, root, config) = setup();
    full_pipeline(&root, &config);
    let val = root.join("preds/val.csv");
    let report = root.join("reports/val.txt");
    let stdout = ok(bin(
        &root,
        &config,
        &["evaluate", "--predictions", s(&val), "--labels", s(&root.join("clean/manifest.csv")), "--out", s(&report)],
    ));
    assert!(stdout.contains("n=8"));
    assert!(report.exists());
    let key = root.join("synth/test_key.csv");
    ok(bin(
        &root,
        &config,
        &["evaluate", "--predictions", s(&root.join("preds/test.csv")), "--labels", s(&key), "--out", s(&root.join("reports/test.txt"))],
    ));

    ok(bin(&root, &config, &["--seed", "4", "train", "--out", s(&root.join("models/second"))]));
    let val2 = root.join("preds/val2.csv");
    let test2 = root.join("preds/test2.csv");
    ok(bin(&root, &config, &["predict", "--checkpoint", s(&root.join("models/second")), "--split", "val", "--out", s(&val2)]));
    ok(bin(&root, &config, &["predict", "--checkpoint", s(&root.join("models/second")), "--split", "test", "--out", s(&test2)]));
    let fused = root.join("preds/fused_val.csv");
    let stdout = ok(bin(
        &root,
        &config,
        &[
            "fuse",
            s(&val),
            s(&val2),
            "--search",
            "--labels",
            s(&root.join("clean/manifest.csv")),
            "--apply",
            s(&root.join("preds/test.csv")),
            s(&test2),
            "--apply-out",
            s(&root.join("preds/fused_test.csv")),
            "--heldout-labels",
            s(&key),
            "--out",
            s(&fused),
        ],
    ));
    assert!(stdout.contains("val s_mtl="), "{stdout}");
    assert!(stdout.contains("heldout s_mtl="), "{stdout}");
    assert!(root.join("preds/fused_test.csv").exists());
    assert!(root.join("preds/fused_val.csv.weights.json").exists());

    let fixed = root.join("preds/fused_fixed.csv");
    ok(bin(
        &root,
        &config,
        &["fuse", s(&val), s(&val2), "--weights", s(&root.join("preds/fused_val.csv.weights.json")), "--out", s(&fixed)],
    ));
    assert_eq!(std::fs::read(&fixed).unwrap(), std::fs::read(&fused).unwrap());

    let log = std::fs::read_to_string(root.join("runs.log")).unwrap();
    for stage in ["synth", "preprocess", "featurize", "train", "predict", "evaluate", "fuse"] {
        assert!(log.contains(&format!("stage={stage} ")), "no {stage} entry");
    }
    assert!(log.contains("stage=train seed=4 "));
}

#[test]
fn identical_runs_give_identical_predictions() {
    let (_a, root_a, config_a) = setup();
    let (_b, root_b, config_b) = setup();
    assert_eq!(full_pipeline(&root_a, &config_a), full_pipeline(&root_b, &config_b));
}

#[test]
fn failures_exit_nonzero_without_artifacts() {
    let (dir, root, config) = setup();
    let out = bin(&root, &config, &["preprocess", "--manifest", s(&dir.path().join("missing.csv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing input"));
    assert!(!root.join("clean/manifest.csv").exists());
    assert!(std::fs::read_to_string(root.join("runs.log")).unwrap().contains("status=error"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = \"seven\"").unwrap();
    let out = bin(&root, &bad, &["synth"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));

    let out = bin(&root, &config, &["featurize", "--frontend", "mfcc"]);
    assert!(!out.status.success());

    let zero = dir.path().join("zero.toml");
    std::fs::write(&zero, "[synth]\ntrain = 0\n").unwrap();
    let out = bin(&root, &zero, &["synth"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train split count must be positive"));
}
