use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
seed = 5
[synth]
num_studies = 12
image_size = 16
frames_min = 6
frames_max = 8
lca_views = false
[loss]
class_weights = balanced
[augment]
enabled = false
[train]
epochs = 1
decay_epoch = 1
[quality]
frame_stride = 2
augment = false
[experiment]
k = 2
splits = 1
val_splits = 1
";

fn domvote(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_domvote"))
        .args(args)
        .env("DOMVOTE_NO_COLOR", "1")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = domvote(&["crossval", "--out", "/tmp/never-written"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config is required"));
}

#[test]
fn unknown_subcommand_exits_one() {
    assert_eq!(domvote(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn bad_override_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = domvote(&["synth", "--config", &cfg, "--out", s(&dir.path().join("o")), "--set", "train.epochs=many"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epochs"));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = domvote(&[
        "crossval",
        "--config",
        &cfg,
        "--out",
        s(&dir.path().join("o")),
        "--set",
        "data.manifest=/nonexistent/manifest.csv",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = domvote(&["synth", "--config", &cfg, "--out", s(d)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        let pa = a.join(&n);
        if pa.is_file() {
            let pb = b.join(&n);
            // the manifest holds absolute paths, so compare it modulo the root
            let (ta, tb) = (std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
            let (ta, tb) = (String::from_utf8_lossy(&ta).replace(s(&a), ""), String::from_utf8_lossy(&tb).replace(s(&b), ""));
            assert_eq!(ta, tb, "{n:?} differs");
        }
    }
}

#[test]
fn crossval_then_report_regenerates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("cv");
    let out = domvote(&["crossval", "--config", &cfg, "--out", s(&run), "--jobs", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("macro recall"));
    for f in ["run.lock.json", "predictions.csv", "report.csv", "report.md", "experiment.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let regen = dir.path().join("regen");
    let out = domvote(&["report", "--in", s(&run), "--out", s(&regen)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.md", "report.csv", "folds.csv"] {
        assert_eq!(std::fs::read(run.join(f)).unwrap(), std::fs::read(regen.join(f)).unwrap(), "{f}");
    }

    // rerun from the lock file alone
    let again = dir.path().join("again");
    let out = domvote(&["crossval", "--config", s(&run.join("run.lock.json")), "--out", s(&again)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(run.join("predictions.csv")).unwrap(),
        std::fs::read(again.join("predictions.csv")).unwrap()
    );
}
