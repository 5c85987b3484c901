use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn clonebench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clonebench"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, episodes: &str, extra: &[&str]) -> Value {
    let mut args = vec![
        "generate", "--game", "dodger", "--episodes", episodes, "--max-frames", "40", "--out",
        p(dir),
    ];
    args.extend_from_slice(extra);
    json(&clonebench(&args))
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(clonebench(&["--help"]).status.code(), Some(0));
    let bad = clonebench(&["train", "--no-such-flag"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("Usage"));
    assert_eq!(clonebench(&[]).status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing-here");
    let out = clonebench(&["stats", "--data", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn generate_stats_filter_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let generated = generate(&data, "10", &["--noise", "0.5", "--seed", "4"]);
    assert_eq!(generated["episode_count"], 10);
    assert!(data.join("config.toml").exists());

    let stats = json(&clonebench(&["stats", "--data", p(&data)]));
    assert_eq!(stats, generated);

    let kept = dir.path().join("kept");
    let filtered = json(&clonebench(&[
        "filter", "--data", p(&data), "--keep-fraction", "0.2", "--out", p(&kept),
    ]));
    assert_eq!(filtered["total"], 10);
    let n = filtered["kept"].as_u64().unwrap();
    assert!((1..10).contains(&n), "{n}");
    let kept_stats = json(&clonebench(&["stats", "--data", p(&kept)]));
    assert_eq!(kept_stats["episode_count"].as_u64(), Some(n));
    assert!(kept_stats["min_score"].as_f64() >= stats["min_score"].as_f64());
}

#[test]
fn zero_shift_keeps_frames_and_negative_delays_parse() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, "3", &[]);
    let original = json(&clonebench(&[
        "shift", "--data", p(&data), "--delay", "0", "--out", p(&dir.path().join("same")),
    ]));
    let again = json(&clonebench(&[
        "shift", "--data", p(&dir.path().join("same")), "--delay", "0", "--out",
        p(&dir.path().join("same2")),
    ]));
    assert_eq!(original["frames_crc32"], again["frames_crc32"]);
    assert_eq!(original["episodes"], 3);

    let back = json(&clonebench(&[
        "shift", "--data", p(&data), "--delay", "-2", "--out", p(&dir.path().join("back")),
    ]));
    assert_ne!(back["frames_crc32"], original["frames_crc32"]);
}

#[test]
fn gradcheck_passes() {
    let out = clonebench(&["gradcheck", "--coords", "4"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, "2", &[]);
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "[train]\nepochs = 2\narchitecture = \"compact\"\n[train.pipeline]\nresize = [21, 21]\n",
    )
    .unwrap();

    let from_file = dir.path().join("a");
    let trained = json(&clonebench(&[
        "train", "--data", p(&data), "--out", p(&from_file), "--config", p(&config),
    ]));
    assert_eq!(trained["loss_curve"].as_array().unwrap().len(), 2);
    let echoed = std::fs::read_to_string(from_file.join("config.toml")).unwrap();
    assert!(echoed.contains("epochs = 2"), "{echoed}");
    assert!(from_file.join("epoch_001.ckpt").exists());
    assert!(from_file.join("loss.csv").exists());

    let from_flag = dir.path().join("b");
    let trained = json(&clonebench(&[
        "train", "--data", p(&data), "--out", p(&from_flag), "--config", p(&config), "--epochs",
        "1",
    ]));
    assert_eq!(trained["loss_curve"].as_array().unwrap().len(), 1);
}

#[test]
fn untrained_model_scores_near_random_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, "1", &[]);
    let model = dir.path().join("model");
    // A single tiny epoch leaves the policy close to its initialisation.
    json(&clonebench(&[
        "train", "--data", p(&data), "--out", p(&model), "--epochs", "1", "--lr", "1e-9",
        "--arch", "compact", "--resize", "21x21",
    ]));
    let scores = dir.path().join("eval");
    let eval = json(&clonebench(&[
        "evaluate", "--model", p(&model.join("model.ckpt")), "--game", "dodger", "--episodes",
        "200", "--out", p(&scores),
    ]));
    let normalized = eval["normalized"].as_f64().unwrap();
    assert!(normalized.abs() < 5.0, "{normalized}");
    let csv = std::fs::read_to_string(scores.join("scores.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
}
