use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn vsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsim"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = vsim(dir, args);
    assert!(
        out.status.success(),
        "vsim {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const SHAPE: &[&str] = &["--num-super", "2", "--num-sub", "4", "--num-topics", "4"];

fn synth(dir: &Path, out: &str, seed: &str) {
    let mut args = vec!["synth", "--out-dir", out, "--seed", seed, "--train-docs", "40", "--test-docs", "8"];
    args.extend(SHAPE);
    args.extend(["--num-labels", "8"]);
    ok(dir, &args);
}

fn train(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["train", "--train", "data/train.tsv", "--out-dir", out, "--iters", "20"];
    args.extend(SHAPE);
    args.extend(extra);
    ok(dir, &args);
}

fn infer(dir: &Path, models: &str, out: &str, extra: &[&str]) {
    let mut args = vec![
        "infer",
        "--models",
        models,
        "--corpus",
        "data/test.tsv",
        "--out-dir",
        out,
        "--n-samples",
        "20",
        "--pam-infer-iters",
        "10",
        "--nnlda-infer-iters",
        "10",
    ];
    args.extend(extra);
    ok(dir, &args);
}

fn read(dir: &Path, path: &str) -> String {
    fs::read_to_string(dir.join(path)).unwrap()
}

fn json(dir: &Path, path: &str) -> serde_json::Value {
    serde_json::from_str(&read(dir, path)).unwrap()
}

/// Posterior columns of decisions.tsv.
fn posteriors(text: &str) -> Vec<String> {
    text.lines()
        .skip(2)
        .map(|l| l.rsplit('\t').next().unwrap().to_string())
        .collect()
}

fn with_data() -> TempDir {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "data", "5");
    tmp
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, "a", "11");
    synth(d, "b", "11");
    synth(d, "c", "12");
    for f in ["train.tsv", "test.tsv", "truth.jsonl", "spec.json"] {
        assert_eq!(read(d, &format!("a/{f}")), read(d, &format!("b/{f}")), "{f}");
    }
    assert_ne!(read(d, "a/train.tsv"), read(d, "c/train.tsv"));
}

#[test]
fn training_twice_with_one_seed_gives_identical_models() {
    let tmp = with_data();
    let d = tmp.path();
    train(d, "m1", &["--seed", "7"]);
    train(d, "m2", &["--seed", "7", "--workers", "3"]);
    train(d, "m3", &["--seed", "8"]);
    for f in ["pam.json", "nnlda.json"] {
        assert_eq!(read(d, &format!("m1/{f}")), read(d, &format!("m2/{f}")), "{f}");
    }
    assert_ne!(read(d, "m1/pam.json"), read(d, "m3/pam.json"));

    let manifest = json(d, "m1/manifest.json");
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["nnlda_iters"], 20);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(outputs.iter().any(|o| o["path"].as_str().unwrap().ends_with("pam.json")));
    assert!(manifest["inputs"][0]["sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn inference_does_not_depend_on_worker_count() {
    let tmp = with_data();
    let d = tmp.path();
    train(d, "m", &[]);
    infer(d, "m", "i1", &["--seed", "3", "--workers", "1"]);
    infer(d, "m", "i4", &["--seed", "3", "--workers", "4"]);
    assert_eq!(read(d, "i1/decisions.tsv"), read(d, "i4/decisions.tsv"));
    assert_eq!(read(d, "i1/scenes.tsv"), read(d, "i4/scenes.tsv"));
}

#[test]
fn zero_da_iterations_ignore_the_semantic_settings() {
    let tmp = with_data();
    let d = tmp.path();
    train(d, "m", &[]);
    infer(d, "m", "a", &["--da-iters", "0"]);
    infer(d, "m", "b", &["--da-iters", "0", "--context", "own-path", "--modulation", "product"]);
    infer(d, "m", "c", &["--da-iters", "2"]);
    let (a, b, c) = (read(d, "a/decisions.tsv"), read(d, "b/decisions.tsv"), read(d, "c/decisions.tsv"));
    assert_eq!(posteriors(&a), posteriors(&b));
    assert_ne!(posteriors(&a), posteriors(&c));
}

#[test]
fn vocabulary_mismatch_exits_with_code_3() {
    let tmp = with_data();
    let d = tmp.path();
    train(d, "m", &[]);
    fs::write(
        d.join("other.tsv"),
        "@label\tname=cat\n@label\tname=dog\nimage_id=i\tregion_id=r\tbag=cat dog\n",
    )
    .unwrap();
    let out = vsim(d, &["infer", "--models", "m", "--corpus", "other.tsv", "--out-dir", "x"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
}

#[test]
fn exit_codes_separate_failure_classes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(vsim(d, &["--help"]).status.code(), Some(0));
    assert_eq!(vsim(d, &["train", "--help"]).status.code(), Some(0));
    assert_eq!(vsim(d, &["train", "--no-such-flag"]).status.code(), Some(1));
    let missing = vsim(d, &["train", "--train", "missing.tsv", "--out-dir", "m"]);
    assert_eq!(missing.status.code(), Some(2));
    fs::write(d.join("bad.tsv"), "image_id=i\tregion_id=r\tbag=a\n").unwrap();
    let unlabeled = vsim(d, &["train", "--train", "bad.tsv", "--out-dir", "m"]);
    assert_eq!(unlabeled.status.code(), Some(2));
    let oracle = vsim(
        d,
        &["oracle-check", "--instances", "1", "--samples", "200", "--burn-in", "5", "--tolerance", "1e-6"],
    );
    assert_eq!(oracle.status.code(), Some(4));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = with_data();
    let d = tmp.path();
    fs::write(d.join("run.toml"), "seed = 5\niters = 3\nnum-topics = 2\n").unwrap();
    ok(d, &["train", "--train", "data/train.tsv", "--out-dir", "a", "--config", "run.toml"]);
    ok(d, &["train", "--train", "data/train.tsv", "--out-dir", "b", "--config", "run.toml", "--iters", "4"]);
    let (a, b) = (json(d, "a/manifest.json"), json(d, "b/manifest.json"));
    assert_eq!(a["seed"], 5);
    assert_eq!(a["config"]["nnlda_iters"], 3);
    assert_eq!(a["config"]["nnlda"]["num_topics"], 2);
    assert_eq!(b["config"]["nnlda_iters"], 4);
    // defaults fill what neither sets
    assert_eq!(a["config"]["pam"]["num_super"], 20);
}

#[test]
fn eval_scores_perfect_decisions_as_perfect() {
    let tmp = with_data();
    let d = tmp.path();
    train(d, "m", &[]);
    infer(d, "m", "i", &["--da-iters", "1"]);

    // rewrite every posterior as the one-hot ground truth
    let decisions = read(d, "i/decisions.tsv");
    let labels: Vec<String> = decisions.lines().next().unwrap()["# labels: ".len()..]
        .split(',')
        .map(String::from)
        .collect();
    let mut truth = std::collections::HashMap::new();
    for line in read(d, "data/test.tsv").lines().filter(|l| !l.starts_with('@')) {
        let fields: std::collections::HashMap<&str, &str> =
            line.split('\t').filter_map(|f| f.split_once('=')).collect();
        truth.insert((fields["image_id"].to_string(), fields["region_id"].to_string()), fields["gt_label"].to_string());
    }
    let mut perfect: Vec<String> = decisions.lines().take(2).map(String::from).collect();
    for line in decisions.lines().skip(2) {
        let f: Vec<&str> = line.split('\t').collect();
        let gt = &truth[&(f[0].to_string(), f[1].to_string())];
        let post: Vec<&str> = labels.iter().map(|l| if l == gt { "1" } else { "0" }).collect();
        perfect.push(format!("{}\t{}\t{gt}\t{gt}\t{}", f[0], f[1], post.join(",")));
    }
    fs::write(d.join("perfect.tsv"), perfect.join("\n") + "\n").unwrap();

    ok(
        d,
        &[
            "eval",
            "--corpus",
            "data/test.tsv",
            "--decisions",
            "perfect.tsv",
            "--scenes",
            "i/scenes.tsv",
            "--reference-scenes",
            "i/scenes.tsv",
            "--out-dir",
            "e",
        ],
    );
    let report = json(d, "e/report.json");
    assert_eq!(report["mean_ap"], 1.0);
    assert_eq!(report["region_top1"], 1.0);
    assert_eq!(report["image_top_n"][0]["accuracy"], 1.0);
    assert_eq!(report["scene"]["mean_symmetric_kl"], 0.0);
    assert_eq!(report["retained_precision"], 1.0);
}

#[test]
fn eval_needs_an_existing_latent_truth_file() {
    let tmp = with_data();
    let d = tmp.path();
    train(d, "m", &[]);
    infer(d, "m", "i", &["--da-iters", "0"]);
    let out = vsim(
        d,
        &[
            "eval",
            "--corpus",
            "data/test.tsv",
            "--decisions",
            "i/decisions.tsv",
            "--scenes",
            "i/scenes.tsv",
            "--latent",
            "nowhere.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    // the generator's truth file is accepted
    ok(
        d,
        &[
            "eval",
            "--corpus",
            "data/test.tsv",
            "--decisions",
            "i/decisions.tsv",
            "--scenes",
            "i/scenes.tsv",
            "--latent",
            "data/truth.jsonl",
        ],
    );
}

#[test]
fn bags_are_built_from_features_when_absent() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let mut args = vec!["synth", "--out-dir", "data", "--seed", "2", "--train-docs", "40", "--test-docs", "6"];
    args.extend(SHAPE);
    args.extend(["--num-labels", "8", "--feature-dim", "3", "--bags-from-features"]);
    ok(d, &args);
    assert!(!read(d, "data/test.tsv").contains("bag="));
    train(d, "m", &["--epsilon", "2"]);
    assert!(d.join("m/reference.tsv").exists());
    infer(d, "m", "i", &[]);
    let rows = read(d, "i/decisions.tsv").lines().count() - 2;
    let regions = read(d, "data/test.tsv").lines().filter(|l| l.starts_with("image_id")).count();
    assert_eq!(rows, regions);
}
