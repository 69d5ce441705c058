mod common;

use std::path::Path;
use std::process::{Command, Output};

use c3::embedding_io::load_embeddings;
use c3_core::embedding::EmbeddingKind;
use common::*;
use serde_json::Value;

fn c3(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c3"))
        .args(args)
        .env_remove("C3_API_KEY")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn augment_with_fixture_config_matches_library_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture_dir().join("config.toml");
    let out = c3(&[
        "--config",
        s(&cfg),
        "augment",
        "--manifest",
        s(&fixture_manifest()),
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lib = augment_fixture(&fixture_config());
    assert_eq!(std::fs::read(dir.path().join("captions.jsonl")).unwrap(), lib.captions);
    assert_eq!(std::fs::read(dir.path().join("traces.jsonl")).unwrap(), lib.traces);
}

#[test]
fn flags_alone_replace_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let script = fixture_dir().join("replay.json");
    let out = c3(&[
        "augment",
        "--manifest",
        s(&fixture_manifest()),
        "--out-dir",
        s(dir.path()),
        "--replay-script",
        s(&script),
        "--no-cot",
        "--parallelism",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let calls = lines(&std::fs::read(dir.path().join("calls.jsonl")).unwrap());
    assert!(calls.iter().all(|c| c["generation_calls"] == 1));
}

#[test]
fn replay_miss_fails_samples_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "{}").unwrap();
    let out = c3(&[
        "augment",
        "--manifest",
        s(&fixture_manifest()),
        "--out-dir",
        s(dir.path()),
        "--replay-script",
        s(&empty),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let captions = lines(&std::fs::read(dir.path().join("captions.jsonl")).unwrap());
    assert_eq!(captions.len(), 2);
    assert!(captions.iter().all(|c| c["error"].is_string()));
}

#[test]
fn fatal_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[gateway]\nno_such_key = 1\n").unwrap();
    let out = c3(&[
        "--config",
        s(&bad),
        "score",
        "--manifest",
        "m.jsonl",
        "--out",
        "o.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = c3(&[
        "score",
        "--manifest",
        s(&dir.path().join("missing.jsonl")),
        "--out",
        s(&dir.path().join("o.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // augment needs a backend
    let out = c3(&[
        "augment",
        "--manifest",
        s(&fixture_manifest()),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = c3(&["replay-record", "--manifest", s(&fixture_manifest()), "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn score_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("scores.jsonl");
    let out = c3(&[
        "--config",
        s(&fixture_dir().join("config.toml")),
        "score",
        "--manifest",
        s(&fixture_manifest()),
        "--out",
        s(&out_path),
        "--full-report",
    ]);
    assert!(out.status.success());
    let reports = lines(&std::fs::read(&out_path).unwrap());
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r["att_v2a"].is_array()));
    assert_eq!(
        lines(&score_fixture(&fixture_config()).1)[0]["score"],
        reports[0]["score"]
    );
}

#[test]
fn synth_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = c3(&[
        "synth",
        "eval-set",
        "--out-dir",
        s(dir.path()),
        "--pairs",
        "60",
        "--dim",
        "8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = dir.path().join("metrics.json");
    let args = [
        "eval",
        "--images",
        &dir.path().join("images.c3em").to_string_lossy(),
        "--text",
        &dir.path().join("text.c3em").to_string_lossy(),
        "--text-aug",
        &dir.path().join("text_aug.c3em").to_string_lossy(),
        "--test-size",
        "20",
        "--ks",
        "1,5",
        "--epochs",
        "1",
    ]
    .map(String::from);
    let mut with_out: Vec<&str> = args.iter().map(String::as_str).collect();
    let stdout = c3(&with_out);
    assert!(stdout.status.success(), "{}", String::from_utf8_lossy(&stdout.stderr));
    with_out.extend(["--out", s(&metrics)]);
    assert!(c3(&with_out).status.success());
    let from_file = std::fs::read(&metrics).unwrap();
    assert_eq!(from_file, stdout.stdout);
    let report: Value = serde_json::from_slice(&from_file).unwrap();
    assert_eq!(report["test_size"], 20);
    assert_eq!(report["baseline"]["steps"], 2);
    let ks: Vec<_> = report["augmented"]["metrics"]["i2t"]["recall_at"]
        .as_object()
        .unwrap()
        .keys()
        .cloned()
        .collect();
    assert_eq!(ks, ["1", "5"]);
}

#[test]
fn synth_embeddings_writes_requested_shape() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.c3em");
    let out = c3(&[
        "synth",
        "embeddings",
        "--kind",
        "visual-regions",
        "--count",
        "5",
        "--dim",
        "7",
        "--seed",
        "3",
        "--out",
        s(&p),
    ]);
    assert!(out.status.success());
    let m = load_embeddings(&p).unwrap();
    assert_eq!((m.count(), m.dim(), m.kind()), (5, 7, EmbeddingKind::VisualRegions));
}

#[test]
fn synth_replay_fixture_matches_shipped() {
    let dir = tempfile::tempdir().unwrap();
    let out = c3(&["synth", "replay-fixture", "--out-dir", s(dir.path())]);
    assert!(out.status.success());
    assert!(tree(dir.path()) == tree(&fixture_dir()));
}
