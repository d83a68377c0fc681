use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 4
[data]
train_categories = 3
test_categories = 2
dump_samples = 3
[model]
conv1_channels = 4
conv2_channels = 4
feature_channels = 3
category_channels = 3
[pretrain]
iterations = 3
batch = 2
[meta]
shot = 3
query = 2
epochs = 2
decay_epochs = [1]
finetune_steps = 2
[eval]
repetitions = 2
query_pool = 3
"#;

fn keyview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keyview")).args(args).env_remove("KEYVIEW_OUT").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = keyview(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("{TINY}{extra}")).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_deterministic_and_hashed() {
    let (dir, cfg) = setup("");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    let da = a.join("seed-4/data");
    let db = b.join("seed-4/data");
    for f in ["samples.bin", "manifest.json"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(da.join("manifest.json")).unwrap()).unwrap();
    let cats = manifest["categories"].as_array().unwrap();
    assert_eq!(cats.iter().filter(|c| c["split"] == "train").count(), 3);
    assert_eq!(cats.iter().filter(|c| c["split"] == "test").count(), 2);
    assert_eq!(manifest["record_count"], 15);

    let (dir2, cfg2) = setup("");
    fs::write(&cfg2, TINY.replace("dump_samples = 3", "dump_samples = 3\nnoise_sigma = 0.02")).unwrap();
    let c = dir2.path().join("c");
    ok(&["gen-data", "--config", s(&cfg2), "--out", s(&c)]);
    let other: serde_json::Value =
        serde_json::from_slice(&fs::read(c.join("seed-4/data/manifest.json")).unwrap()).unwrap();
    assert_ne!(other["config_hash"], manifest["config_hash"]);
}

#[test]
fn bad_config_reports_the_line() {
    let (_dir, cfg) = setup("[meta.weights]\nlcom = 0.5\n");
    let out = keyview(&["gen-data", "--config", s(&cfg)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lcom") && err.contains("line"), "{err}");
}

#[test]
fn train_resume_eval_pipeline() {
    let (dir, cfg) = setup("");
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let line = ok(&["meta-train", "--config", s(&cfg), "--out", s(&full), "--checkpoint-every", "2"]);
    assert!(line.contains("final smoothed query loss"), "{line}");
    ok(&["meta-train", "--config", s(&cfg), "--out", s(&part), "--stop-after", "3"]);
    let ckpt = part.join("seed-4/model.ckpt");
    ok(&["meta-train", "--config", s(&cfg), "--out", s(&part), "--resume", s(&ckpt)]);
    let full_ckpt = full.join("seed-4/model.ckpt");
    assert_eq!(fs::read(&full_ckpt).unwrap(), fs::read(&ckpt).unwrap());
    let log = fs::read_to_string(full.join("seed-4/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);

    let out = ok(&["eval", "--config", s(&cfg), "--out", s(&full), "--checkpoint", s(&full_ckpt)]);
    assert!(out.contains("ms-on_lcon-on_kp-on"), "{out}");
    let csv = fs::read_to_string(full.join("seed-4/eval/ms-on_lcon-on_kp-on.csv")).unwrap();
    assert!(csv.starts_with("category_id,repetition,acc30,mederr_deg,n_query,flagged_count"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    // same seed and config: identical metrics
    let again = dir.path().join("again");
    ok(&["eval", "--config", s(&cfg), "--out", s(&again), "--checkpoint", s(&full_ckpt), "--workers", "2"]);
    assert_eq!(csv, fs::read_to_string(again.join("seed-4/eval/ms-on_lcon-on_kp-on.csv")).unwrap());

    ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--out",
        s(&full),
        "--checkpoint",
        s(&full_ckpt),
        "--baseline",
        "fixed-8-keypoints",
    ]);
    assert!(
        keyview(&["eval", "--config", s(&cfg), "--checkpoint", s(&full_ckpt), "--baseline", "nope"]).status.code()
            == Some(1)
    );
    let out =
        ok(&["finetune", "--config", s(&cfg), "--out", s(&full), "--checkpoint", s(&full_ckpt), "--category", "1"]);
    assert!(out.contains("over 3 queries"), "{out}");

    // another seed means another config hash
    let out = keyview(&["eval", "--config", s(&cfg), "--seed", "5", "--checkpoint", s(&full_ckpt)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));

    let out =
        ok(&["sweep-shots", "--config", s(&cfg), "--out", s(&full), "--checkpoint", s(&full_ckpt), "--shots", "1,3"]);
    assert!(out.contains("shot-1") && out.contains("shot-3"), "{out}");
    let shots = fs::read_to_string(full.join("seed-4/sweep-shots/shots.csv")).unwrap();
    assert_eq!(shots.lines().count(), 3);

    let out = ok(&["ablate", "--config", s(&cfg), "--out", s(&full), "--checkpoint", s(&full_ckpt)]);
    for label in ["ms-on_lcon-on_kp-on", "ms-off_lcon-on_kp-on", "ms-on_lcon-off_kp-on", "ms-on_lcon-on_kp-off"] {
        assert!(out.contains(label), "{out}");
    }
    assert_eq!(csv, fs::read_to_string(full.join("seed-4/ablate/ms-on_lcon-on_kp-on.csv")).unwrap());
}

#[test]
fn reference_predictors_and_threshold_gate() {
    let (dir, cfg) = setup("");
    let out = ok(&["eval", "--config", s(&cfg), "--out", s(dir.path()), "--reference", "oracle"]);
    assert!(out.contains("acc30 1.0000"), "{out}");
    let (dir, cfg) = setup("min_acc30 = 0.9\n");
    let out = keyview(&["eval", "--config", s(&cfg), "--out", s(dir.path()), "--reference", "random"]);
    assert_eq!(out.status.code(), Some(2));
    let out = keyview(&["eval", "--config", s(&cfg), "--out", s(dir.path()), "--reference", "oracle"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn output_root_from_environment() {
    let (dir, cfg) = setup("");
    let out = Command::new(env!("CARGO_BIN_EXE_keyview"))
        .args(["eval", "--config", s(&cfg), "--reference", "random"])
        .env("KEYVIEW_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("seed-4/eval/random.json").exists());
}

#[test]
fn grad_check_passes() {
    let out = ok(&["grad-check", "--trials", "3"]);
    assert!(out.contains("bilevel-quadratic") && !out.contains("FAIL"), "{out}");
    let out = ok(&["grad-check", "--trials", "3", "--first-order"]);
    assert!(out.contains("first-order mode"), "{out}");
}
