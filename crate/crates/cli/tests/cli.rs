use std::path::Path;
use std::process::{Command, Output};

use pumpsched_core::dataset::parse_trajectory;

fn pumpsched(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pumpsched"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("PUMPSCHED_CONFIG")
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&pumpsched(dir.path(), &["--help"])), 0);
    let version = pumpsched(dir.path(), &["--version"]);
    assert_eq!(code(&version), 0);
    assert!(String::from_utf8_lossy(&version.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&pumpsched(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&pumpsched(dir.path(), &["train"])), 1);
    assert_eq!(code(&pumpsched(dir.path(), &["simulate", "--policy", "np9"])), 1);
}

#[test]
fn invalid_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [("typo.json", "{\"tank\": {}}"), ("negative.json", "{\"env\": {\"dt_minutes\": -1}}")] {
        std::fs::write(dir.path().join(name), text).unwrap();
        assert_eq!(code(&pumpsched(dir.path(), &["--config", name, "dataset", "synth"])), 2, "{name}");
    }

    std::fs::write(dir.path().join("log.csv"), "timestamp,level\nnot a log\n").unwrap();
    assert_eq!(code(&pumpsched(dir.path(), &["dataset", "validate", "log.csv"])), 2);

    std::fs::write(dir.path().join("model.ckpt"), b"garbage").unwrap();
    let out = pumpsched(dir.path(), &["eval", "--checkpoint", "model.ckpt"]);
    assert!(matches!(code(&out), 2 | 3), "{out:?}");
}

#[test]
fn missing_files_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = pumpsched(dir.path(), &["train", "--data", "absent.csv"]);
    assert!(matches!(code(&out), 2 | 3));
    assert!(!out.stderr.is_empty());
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    for (out, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        let run = pumpsched(dir.path(), &["--out", out, "--seed", seed, "dataset", "synth"]);
        assert_eq!(code(&run), 0, "{run:?}");
    }
    let read = |d: &str| std::fs::read(dir.path().join(d).join("synth.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn replay_reproduces_recorded_actions() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&pumpsched(dir.path(), &["--out", "src", "dataset", "synth", "--days", "2"])), 0);
    let run = pumpsched(dir.path(), &["--out", "replay", "simulate", "--replay", "src/synth.csv"]);
    assert_eq!(code(&run), 0, "{run:?}");
    let load = |p: &str| parse_trajectory(std::fs::File::open(dir.path().join(p)).unwrap()).unwrap();
    let original = load("src/synth.csv");
    let replayed = load("replay/trajectory.csv");
    assert_eq!(original.len(), replayed.len());
    for (a, b) in original.iter().zip(&replayed) {
        assert_eq!(a.action, b.action);
        assert!((a.record.tank_level - b.record.tank_level).abs() < 1e-9);
    }
}

#[test]
fn every_command_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run = pumpsched(dir.path(), &["--out", "o", "--seed", "9", "simulate", "--policy", "np2", "--horizon", "120"]);
    assert_eq!(code(&run), 0, "{run:?}");
    let summary: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert!(summary.is_object());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("o/simulate.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["subcommand"], "simulate");
    assert!(manifest["outputs"].as_array().unwrap().iter().any(|p| p.as_str().unwrap().ends_with("trajectory.csv")));
}
