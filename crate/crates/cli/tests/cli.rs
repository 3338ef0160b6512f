use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn uplvp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uplvp")).args(args).output().unwrap()
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    path
}

fn small(dir: &Path) -> PathBuf {
    write_config(dir, r#"{"fixture": {"scenes": 3}, "train": {"steps": 4}}"#)
}

fn run_ok(cmd: &str, config: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = uplvp(&args);
    assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn propose_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok("propose", &cfg, &a, &[]);
    run_ok("propose", &cfg, &b, &[]);
    let csv = std::fs::read_to_string(a.join("proposals.csv")).unwrap();
    assert_eq!(csv, std::fs::read_to_string(b.join("proposals.csv")).unwrap());
    assert!(csv.lines().count() > 1);
    for f in ["resolved-config.json", "fixture-hash.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unknown_key_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"train": {"loss": {"weights": {"lamda_cls": 1.0}}}}"#);
    let o = uplvp(&["propose", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("lamda_cls"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn missing_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nope.json");
    let o = uplvp(&["pretrain", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim_end(), format!("config not found: {}", path.display()));
}

#[test]
fn compare_writes_curves_and_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = dir.path().join("cmp");
    run_ok("compare", &cfg, &out, &["--strategies", "cosine,none", "--steps", "5"]);
    let curves = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().next().unwrap(), "step,strategy,total,smoothed");
    assert_eq!(curves.lines().count(), 1 + 5 * 2);
    let steps = std::fs::read_to_string(out.join("steps-to-threshold.csv")).unwrap();
    assert!(steps.contains("cosine") && steps.contains("none"));
}

#[test]
fn every_subcommand_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = dir.path().join("all");
    run_ok("synth", &cfg, &out, &[]);
    run_ok("match", &cfg, &out, &[]);
    run_ok("pretrain", &cfg, &out, &[]);
    run_ok("eval-ap", &cfg, &out, &[]);
    run_ok("atlas", &cfg, &out, &[]);
    for f in [
        "manifests.txt",
        "match-report.csv",
        "train-log.csv",
        "checkpoint.ten",
        "run-manifest.json",
        "eval-report.csv",
        "diversity.csv",
        "atlas/kernel_000.pgm",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }

    // the written fixture loads back with the same hash
    let manifests: Vec<String> = std::fs::read_to_string(out.join("manifests.txt"))
        .unwrap()
        .lines()
        .map(|l| format!("\"all/{l}\""))
        .collect();
    let reload = write_config(
        dir.path(),
        &format!(r#"{{"scene_manifests": [{}], "checkpoint": "all/checkpoint.ten", "detections": "model"}}"#, manifests.join(",")),
    );
    let again = dir.path().join("again");
    run_ok("eval-ap", &reload, &again, &[]);
    assert_eq!(
        std::fs::read(out.join("fixture-hash.txt")).unwrap(),
        std::fs::read(again.join("fixture-hash.txt")).unwrap()
    );
}

#[test]
fn match_rejects_no_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"fixture": {"scenes": 2}, "train": {"strategy": "none"}}"#);
    let o = uplvp(&["match", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
