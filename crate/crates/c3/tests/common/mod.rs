//! Helpers shared by the integration suites.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use c3::config::PipelineConfig;
use c3::pipeline::{cmd_augment, cmd_score, RunSummary, CALLS_FILE, CAPTIONS_FILE, TRACES_FILE};
use serde_json::Value;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/replay")
}

pub fn fixture_manifest() -> PathBuf {
    fixture_dir().join("manifest.jsonl")
}

pub fn fixture_config() -> PipelineConfig {
    PipelineConfig::load(&fixture_dir().join("config.toml")).unwrap()
}

/// Raw bytes of the three augment outputs.
pub struct AugmentRun {
    pub summary: RunSummary,
    pub captions: Vec<u8>,
    pub traces: Vec<u8>,
    pub calls: Vec<u8>,
}

impl AugmentRun {
    pub fn captions(&self) -> Vec<Value> {
        lines(&self.captions)
    }

    pub fn traces(&self) -> Vec<Value> {
        lines(&self.traces)
    }

    pub fn calls(&self) -> Vec<Value> {
        lines(&self.calls)
    }
}

pub fn lines(bytes: &[u8]) -> Vec<Value> {
    std::str::from_utf8(bytes)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub fn augment_fixture(cfg: &PipelineConfig) -> AugmentRun {
    let out = tempfile::tempdir().unwrap();
    let summary = cmd_augment(&fixture_manifest(), cfg, out.path()).unwrap();
    let read = |f: &str| std::fs::read(out.path().join(f)).unwrap();
    AugmentRun {
        summary,
        captions: read(CAPTIONS_FILE),
        traces: read(TRACES_FILE),
        calls: read(CALLS_FILE),
    }
}

pub fn score_fixture(cfg: &PipelineConfig) -> (RunSummary, Vec<u8>) {
    let out = tempfile::tempdir().unwrap();
    let path = out.path().join("scores.jsonl");
    let summary = cmd_score(&fixture_manifest(), cfg, &path).unwrap();
    (summary, std::fs::read(path).unwrap())
}

/// Every file under `dir`, relative path to bytes, sorted.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
