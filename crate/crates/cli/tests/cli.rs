//! End-to-end runs of the `lanegen` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const SMALL: &str = "\
[train]
epochs = 2
batch_size = 2
checkpoint_every = 1
[train.arch]
image_size = 32
base_channels = 8
depth = 3
skip_levels = [1, 2]
";

fn lanegen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanegen"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = lanegen(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Relative path → SHA-256 of every file under `root`.
fn tree_digest(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = hex::encode(Sha256::digest(fs::read(&p).unwrap()));
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), digest);
            }
        }
    }
    out
}

fn count_png(dir: &Path) -> usize {
    tree_digest(dir)
        .keys()
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .count()
}

fn setup(counts: &str) -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    ok(tmp.path(), &["synth", "--out", "data", "--seed", "1", "--counts", counts, "--size", "32"]);
    tmp
}

#[test]
fn synth_creates_pairs_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--seed", "1", "--counts", "8,2,2", "--size", "64", "--out", "a"]);
    ok(d, &["synth", "--seed", "1", "--counts", "8,2,2", "--size", "64", "--out", "b"]);
    assert_eq!(count_png(&d.join("a")), 24, "12 pairs = 24 images");
    for split in ["train", "val", "test"] {
        assert!(d.join("a").join(split).join("images").is_dir());
    }
    assert_eq!(tree_digest(&d.join("a")), tree_digest(&d.join("b")));
    assert!(fs::read_to_string(d.join("a/config.toml")).unwrap().contains("train = 8"));
}

#[test]
fn missing_palette_exits_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lanegen(tmp.path(), &["synth", "--out", "x", "--palette", "missing.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
}

#[test]
fn invalid_overrides_exit_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    for set in ["train.batch_size=0", "train.nope=1", "train.weights.mse=-1"] {
        let out = lanegen(tmp.path(), &["synth", "--out", "x", "--set", set]);
        assert_eq!(out.status.code(), Some(2), "{set}");
    }
    let out = lanegen(tmp.path(), &["synth"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_artifacts_and_ablation_switch_zeroes_adversarial_term() {
    let tmp = setup("4,1,1");
    let d = tmp.path();
    ok(d, &["train", "--data", "data", "--out", "run", "--config", "small.toml", "--set", "train.epochs=1"]);
    for f in ["final.ckpt", "train_log.csv", "checksums.json", "config.toml", "checkpoints/epoch_0001.ckpt"] {
        assert!(d.join("run").join(f).is_file(), "{f}");
    }
    let echoed = fs::read_to_string(d.join("run/config.toml")).unwrap();
    assert!(echoed.contains("epochs = 1"));

    ok(d, &["train", "--data", "data", "--out", "plain", "--config", "small.toml", "--no-adversarial"]);
    let log = fs::read_to_string(d.join("plain/train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,epoch,l_mse,l_adv,l_total_g,l_d"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let cols: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[3], 0.0, "l_adv in {row}");
        assert_eq!(cols[5], 0.0, "l_d in {row}");
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = setup("4,1,1");
    let d = tmp.path();
    ok(d, &["train", "--data", "data", "--out", "full", "--config", "small.toml"]);
    ok(d, &["train", "--data", "data", "--out", "half", "--config", "small.toml", "--set", "train.epochs=1"]);
    ok(
        d,
        &["train", "--data", "data", "--out", "rest", "--config", "small.toml", "--resume", "half/final.ckpt"],
    );
    assert_eq!(
        fs::read_to_string(d.join("full/checksums.json")).unwrap(),
        fs::read_to_string(d.join("rest/checksums.json")).unwrap()
    );
}

#[test]
fn resume_rejects_other_architecture_and_bad_files() {
    let tmp = setup("4,1,1");
    let d = tmp.path();
    ok(d, &["train", "--data", "data", "--out", "run", "--config", "small.toml", "--set", "train.epochs=1"]);
    let out = lanegen(
        d,
        &["train", "--data", "data", "--out", "x", "--config", "small.toml", "--set", "train.arch.base_channels=4", "--resume", "run/final.ckpt"],
    );
    assert_eq!(out.status.code(), Some(2));
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = lanegen(d, &["train", "--data", "data", "--out", "y", "--config", "small.toml", "--resume", "junk.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
}

#[test]
fn eval_self_check_is_perfect_and_shaped_per_class() {
    let tmp = setup("2,1,3");
    let d = tmp.path();
    ok(d, &["eval", "--self-check", "--data", "data", "--split", "test", "--out", "ev", "--config", "small.toml"]);
    let csv = fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "class,iou,precision,recall");
    // six non-background classes, then the mean
    assert_eq!(lines.len(), 1 + 6 + 1);
    assert!(lines.last().unwrap().starts_with("mean,"));
    for row in &lines[1..] {
        for v in row.split(',').skip(1) {
            assert!(v == "1.000000" || v == "NA", "{row}");
        }
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(json["mean_iou"], 1.0);
    assert_eq!(json["pixel_accuracy"], 1.0);
}

#[test]
fn eval_on_empty_split_exits_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::create_dir_all(d.join("data/test/images")).unwrap();
    fs::create_dir_all(d.join("data/test/labels")).unwrap();
    let out = lanegen(d, &["eval", "--self-check", "--data", "data", "--split", "test", "--out", "ev"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn eval_and_infer_with_checkpoint() {
    let tmp = setup("4,1,2");
    let d = tmp.path();
    ok(d, &["train", "--data", "data", "--out", "run", "--config", "small.toml", "--set", "train.epochs=1"]);
    ok(d, &["eval", "--checkpoint", "run/final.ckpt", "--data", "data", "--out", "ev", "--save-outputs"]);
    assert!(d.join("ev/metrics.json").is_file());
    assert!(d.join("ev/diagnostics.json").is_file());
    assert_eq!(count_png(&d.join("ev/outputs")), 4);

    ok(d, &["infer", "--checkpoint", "run/final.ckpt", "--input", "data/test/images", "--out", "a", "--seed", "5"]);
    ok(d, &["infer", "--checkpoint", "run/final.ckpt", "--input", "data/test/images", "--out", "b", "--seed", "5"]);
    assert!(d.join("a/test_00000.gen.png").is_file());
    assert!(d.join("a/test_00001.label.png").is_file());
    assert_eq!(tree_digest(&d.join("a")), tree_digest(&d.join("b")));

    let out = lanegen(d, &["eval", "--data", "data", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2), "no checkpoint and no self-check");
    let out = lanegen(d, &["eval", "--checkpoint", "nope.ckpt", "--data", "data", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn perturb_uses_balanced_prefix_and_leaves_input_untouched() {
    let tmp = setup("4,1,7");
    let d = tmp.path();
    ok(d, &["train", "--data", "data", "--out", "run", "--config", "small.toml", "--set", "train.epochs=1"]);
    let before = tree_digest(&d.join("data"));
    let out = lanegen(
        d,
        &["perturb", "--data", "data", "--split", "test", "--out", "adv", "--seed", "3", "--checkpoint", "run/final.ckpt"],
    );
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("not divisible by 3"), "{stderr}");
    assert_eq!(tree_digest(&d.join("data")), before);
    for (set, suffix) in [("adverse_noise", "noise"), ("adverse_gamma", "gamma"), ("adverse_occl", "occl")] {
        assert_eq!(count_png(&d.join("adv").join(set)), 4, "{set}: 2 pairs");
        for e in fs::read_dir(d.join("adv").join(set).join("labels")).unwrap() {
            let name = e.unwrap().file_name().into_string().unwrap();
            assert!(name.ends_with(&format!("_{suffix}.png")), "{name}");
        }
    }
    let report = fs::read_to_string(d.join("adv/adverse_report.csv")).unwrap();
    let sets: Vec<&str> = report.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(sets, ["clean_test", "adverse_noise", "adverse_gamma", "adverse_occl"]);
}

#[test]
fn perturb_rejects_tiny_split() {
    let tmp = setup("2,1,2");
    let out = lanegen(tmp.path(), &["perturb", "--data", "data", "--out", "adv", "--config", "small.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_emits_side_by_side_table() {
    let tmp = setup("4,1,2");
    let d = tmp.path();
    ok(
        d,
        &["ablate", "--data", "data", "--out", "ab", "--config", "small.toml", "--set", "train.epochs=1", "--seeds", "1,2"],
    );
    let table = fs::read_to_string(d.join("ab/ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "class,iou_with_adv,iou_without_adv");
    assert!(lines.last().unwrap().starts_with("mean,"));
    assert_eq!(lines.len(), 8);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("ab/ablation_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 2);
    for seed in [1, 2] {
        for tag in ["with_adv", "without_adv"] {
            assert!(d.join(format!("ab/seed_{seed}/{tag}/metrics.csv")).is_file());
        }
    }
}
