//! The `score`, `augment` and `eval` commands.
//!
//! Samples are processed by a bounded pool of workers; results are
//! collected in manifest order and written by a single writer, so output
//! line order never depends on scheduling. A failing sample produces an
//! error record and never stops the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use c3_core::attributes::{merge_pools, AttributePool, AttributeSource, Modality};
use c3_core::completeness::{score_sample, CoverageReport};
use c3_core::embedding::{EmbeddingKind, EmbeddingMatrix};
use c3_core::mdp::{ask_cost, EpisodeTrace};
use c3_core::retrieval::{evaluate, train, RetrievalMetrics};
use c3_core::rng::DetRng;
use c3_core::Matrix;
use serde::Serialize;
use thiserror::Error;

use crate::augmenter::{AugmentSettings, AugmentedCaption, Augmenter, SampleContext, Stage, StageOutput};
use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::config::{ConfigError, PipelineConfig};
use crate::consistency::{evaluate_with_retries, VerifySettings};
use crate::embedding_io::{load_embeddings, load_manifest, write_atomic, EmbeddingIoError, ManifestError, Sample};
use crate::extraction::{extract_attributes, ExtractSettings};
use crate::gateway::{CallLog, CallRecord, Chat};
use crate::templates::{QuestionBank, Templates};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingIoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Eval(String),
}

/// Outcome counts of a batch command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSummary {
    pub total: usize,
    pub failed: usize,
}

impl RunSummary {
    pub fn ok(&self) -> bool {
        self.failed == 0
    }
}

/// Applies `f` to every item with at most `workers` threads and returns
/// the results in input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

fn jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    write_atomic(path, bytes).map_err(|source| PipelineError::Write {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub n_regions: usize,
    pub n_attributes: usize,
    pub c_region: Vec<f64>,
    pub c_attr: Vec<f64>,
    pub mean_region: f64,
    pub mean_attr: f64,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub att_v2a: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub att_a2v: Option<Vec<Vec<f64>>>,
}

impl ScoreRecord {
    pub fn new(sample_id: &str, r: CoverageReport, full: bool) -> Self {
        let rows = |m: &Matrix| m.row_iter().map(<[f64]>::to_vec).collect::<Vec<_>>();
        Self {
            sample_id: sample_id.to_string(),
            n_regions: r.c_region.len(),
            n_attributes: r.c_attr.len(),
            att_v2a: full.then(|| rows(&r.att_v2a)),
            att_a2v: full.then(|| rows(&r.att_a2v)),
            c_region: r.c_region,
            c_attr: r.c_attr,
            mean_region: r.mean_region,
            mean_attr: r.mean_attr,
            score: r.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRecord {
    pub sample_id: String,
    pub error: String,
}

#[derive(Serialize)]
#[serde(untagged)]
enum Line<T> {
    Ok(T),
    Err(ErrorRecord),
}

fn load_kind(path: &Path, kind: EmbeddingKind) -> Result<EmbeddingMatrix, String> {
    let m = load_embeddings(path).map_err(|e| e.to_string())?;
    if m.kind() != kind {
        return Err(format!(
            "{}: expected {} embeddings, found {}",
            path.display(),
            kind.name(),
            m.kind().name()
        ));
    }
    Ok(m)
}

fn attribute_embeddings(sample: &Sample) -> Result<EmbeddingMatrix, String> {
    let path = sample
        .attribute_embedding_ref
        .as_ref()
        .ok_or("manifest entry has no attribute_embedding_ref")?;
    load_kind(path, EmbeddingKind::AttributeTexts)
}

/// Coverage report from a sample's embedding files.
pub fn score_one(sample: &Sample, cfg: &PipelineConfig) -> Result<CoverageReport, String> {
    let v = load_kind(&sample.image_embedding_ref, EmbeddingKind::VisualRegions)?;
    let e = attribute_embeddings(sample)?;
    let p = cfg.projections(v.dim(), e.dim()).map_err(|e| e.to_string())?;
    score_sample(&v, &e, &p).map_err(|e| e.to_string())
}

/// Scores every sample of `manifest` and writes one JSON line per sample
/// (a report or an error record) to `out`.
pub fn cmd_score(manifest: &Path, cfg: &PipelineConfig, out: &Path) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let samples = load_manifest(manifest)?;
    let results = parallel_map(&samples, cfg.gateway.parallelism, |s| score_one(s, cfg));
    let mut failed = 0;
    let lines: Vec<_> = samples
        .iter()
        .zip(results)
        .map(|(s, r)| match r {
            Ok(report) => Line::Ok(ScoreRecord::new(&s.id, report, cfg.completeness.full_report)),
            Err(error) => {
                log::error!("{}: {error}", s.id);
                failed += 1;
                Line::Err(ErrorRecord {
                    sample_id: s.id.clone(),
                    error,
                })
            }
        })
        .collect();
    write_file(out, &jsonl(&lines))?;
    Ok(RunSummary {
        total: samples.len(),
        failed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolEntry {
    pub text: String,
    pub source: AttributeSource,
}

/// One line of `captions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaptionRecord {
    pub sample_id: String,
    pub original: String,
    pub generation: u32,
    pub stages: BTreeMap<Stage, StageOutput>,
    #[serde(rename = "final")]
    pub final_caption: String,
    /// True only when a verification episode accepted this caption.
    pub verified: bool,
    pub episodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub cost_per_ask: f64,
    pub attributes: Vec<PoolEntry>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// One line of `calls.jsonl`: the gateway calls made for a sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CallSummary {
    pub sample_id: String,
    pub total: usize,
    /// Caption generation requests (stage or direct prompts, re-prompts
    /// included).
    pub generation_calls: usize,
    pub verification_calls: usize,
    pub calls: Vec<CallRecord>,
}

impl CallSummary {
    fn new(sample_id: &str, calls: Vec<CallRecord>) -> Self {
        let kind = |c: &CallRecord| c.tag.split(':').nth(2).map(str::to_string);
        let verification_calls = calls.iter().filter(|c| kind(c).as_deref() == Some("verify")).count();
        let generation_calls = calls
            .iter()
            .filter(|c| c.tag.split(':').nth(1).is_some_and(|g| g.starts_with("gen")))
            .count()
            - verification_calls;
        Self {
            sample_id: sample_id.to_string(),
            total: calls.len(),
            generation_calls,
            verification_calls,
            calls,
        }
    }
}

/// Everything `cmd_augment` writes.
#[derive(Debug, Default)]
pub struct AugmentOutputs {
    pub captions: Vec<u8>,
    pub traces: Vec<u8>,
    pub calls: Vec<u8>,
    pub summary: Option<RunSummary>,
}

struct SampleOutcome {
    caption: Result<CaptionRecord, String>,
    traces: Vec<EpisodeTrace>,
    calls: Vec<CallRecord>,
}

/// Shared read-only state for augmenting one batch.
pub struct AugmentJob<'a> {
    pub cfg: &'a PipelineConfig,
    pub templates: &'a Templates,
    pub bank: &'a QuestionBank,
}

impl AugmentJob<'_> {
    /// Extracts attributes from both modalities and merges them.
    pub fn build_pool(&self, sample: &Sample, chat: &dyn Chat) -> Result<(AttributePool, Vec<String>), String> {
        let settings = ExtractSettings {
            model_id: &self.cfg.gateway.extractor_model,
            max_tokens: self.cfg.augment.extract_max_tokens,
            cap: self.cfg.augment.attribute_cap,
        };
        let img = extract_attributes(
            &sample.id,
            &sample.image_ref,
            Modality::Image,
            chat,
            &self.templates.extract_image,
            &settings,
        )
        .map_err(|e| format!("image attribute extraction: {e}"))?;
        let txt = extract_attributes(
            &sample.id,
            &sample.caption,
            Modality::Text,
            chat,
            &self.templates.extract_text,
            &settings,
        )
        .map_err(|e| format!("text attribute extraction: {e}"))?;
        let warnings = img.warning.into_iter().chain(txt.warning).collect();
        let pool = merge_pools(&sample.id, &img.attributes, &txt.attributes, self.cfg.merge_options())
            .map_err(|e| e.to_string())?;
        Ok((pool, warnings))
    }

    fn augment_one(
        &self,
        sample: &Sample,
        chat: &dyn Chat,
        traces: &mut Vec<EpisodeTrace>,
    ) -> Result<CaptionRecord, String> {
        let cfg = self.cfg;
        let (pool, mut warnings) = self.build_pool(sample, chat)?;
        let (score, cost_per_ask) = if cfg.ablation.no_completeness {
            (None, 1.0)
        } else {
            let e = attribute_embeddings(sample)?;
            if e.count() != pool.len() {
                return Err(format!(
                    "attribute embeddings have {} rows but the pool has {} attributes",
                    e.count(),
                    pool.len()
                ));
            }
            let v = load_kind(&sample.image_embedding_ref, EmbeddingKind::VisualRegions)?;
            let p = cfg.projections(v.dim(), e.dim()).map_err(|e| e.to_string())?;
            let report = score_sample(&v, &e, &p).map_err(|e| e.to_string())?;
            let cost = ask_cost(report.score).map_err(|e| e.to_string())?;
            (Some(report.score), cost)
        };
        let augmenter = Augmenter::new(
            self.templates,
            AugmentSettings {
                model_id: cfg.gateway.generator_model.clone(),
                max_tokens: cfg.augment.stage_max_tokens,
                caption_max_tokens: cfg.augment.caption_max_tokens,
                direct: cfg.ablation.no_cot,
            },
        );
        let ctx = SampleContext {
            sample_id: &sample.id,
            caption: &sample.caption,
            image_ref: &sample.image_ref,
            pool: &pool,
        };
        let (caption, verified): (AugmentedCaption, bool) = if cfg.ablation.no_consistency {
            (augmenter.augment(&ctx, chat).map_err(|e| e.to_string())?, false)
        } else {
            let settings = VerifySettings {
                model_id: cfg.gateway.verifier_model.clone(),
                max_tokens: cfg.verify.answer_max_tokens,
                policy: cfg.verify.policy,
                max_regen: cfg.verify.max_regen,
            };
            match evaluate_with_retries(
                &augmenter,
                &ctx,
                self.bank,
                self.templates,
                chat,
                cost_per_ask,
                &settings,
            ) {
                Ok(ev) => {
                    traces.extend(ev.traces);
                    (ev.caption, ev.verified)
                }
                Err(failure) => {
                    traces.extend(failure.traces);
                    return Err(failure.error.to_string());
                }
            }
        };
        warnings.extend(caption.warnings().map(str::to_string));
        if !verified && !cfg.ablation.no_consistency {
            warnings.push(format!(
                "no generation passed verification; kept generation {} unverified",
                caption.generation
            ));
        }
        Ok(CaptionRecord {
            sample_id: sample.id.clone(),
            original: caption.original,
            generation: caption.generation,
            stages: caption.stages,
            final_caption: caption.final_caption,
            verified,
            episodes: traces.len(),
            score,
            cost_per_ask,
            attributes: pool
                .attributes
                .iter()
                .map(|a| PoolEntry {
                    text: a.text.clone(),
                    source: a.source,
                })
                .collect(),
            warnings,
        })
    }

    fn run_sample(&self, sample: &Sample, chat: &(dyn Chat + Sync)) -> SampleOutcome {
        let log = CallLog::new(chat);
        let mut traces = Vec::new();
        let caption = self.augment_one(sample, &log, &mut traces);
        if let Err(e) = &caption {
            log::error!("{}: {e}", sample.id);
        }
        SampleOutcome {
            caption,
            traces,
            calls: log.into_calls(),
        }
    }

    /// Runs every sample and renders the three output files.
    pub fn run(&self, samples: &[Sample], chat: &(dyn Chat + Sync)) -> AugmentOutputs {
        let outcomes = parallel_map(samples, self.cfg.gateway.parallelism, |s| self.run_sample(s, chat));
        let mut captions = Vec::new();
        let mut traces = Vec::new();
        let mut calls = Vec::new();
        let mut failed = 0;
        for (s, o) in samples.iter().zip(outcomes) {
            captions.push(match o.caption {
                Ok(c) => Line::Ok(c),
                Err(error) => {
                    failed += 1;
                    Line::Err(ErrorRecord {
                        sample_id: s.id.clone(),
                        error,
                    })
                }
            });
            traces.extend(o.traces);
            calls.push(CallSummary::new(&s.id, o.calls));
        }
        AugmentOutputs {
            captions: jsonl(&captions),
            traces: jsonl(&traces),
            calls: jsonl(&calls),
            summary: Some(RunSummary {
                total: samples.len(),
                failed,
            }),
        }
    }
}

pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const CALLS_FILE: &str = "calls.jsonl";

pub fn write_augment_outputs(out_dir: &Path, o: &AugmentOutputs) -> Result<(), PipelineError> {
    write_file(&out_dir.join(CAPTIONS_FILE), &o.captions)?;
    write_file(&out_dir.join(TRACES_FILE), &o.traces)?;
    write_file(&out_dir.join(CALLS_FILE), &o.calls)
}

/// Runs `augment` on `manifest` with `chat`, writing into `out_dir`.
pub fn augment_with(
    manifest: &Path,
    cfg: &PipelineConfig,
    chat: &(dyn Chat + Sync),
    out_dir: &Path,
) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let samples = load_manifest(manifest)?;
    let templates = cfg.templates()?;
    let bank = cfg.question_bank()?;
    let job = AugmentJob {
        cfg,
        templates: &templates,
        bank: &bank,
    };
    let outputs = job.run(&samples, chat);
    write_augment_outputs(out_dir, &outputs)?;
    Ok(outputs.summary.expect("set by run"))
}

/// Per sample: extract, merge, score, augment, verify. Writes
/// `captions.jsonl`, `traces.jsonl` and `calls.jsonl` into `out_dir`.
pub fn cmd_augment(manifest: &Path, cfg: &PipelineConfig, out_dir: &Path) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let gateway = cfg.build_gateway()?;
    augment_with(manifest, cfg, &gateway, out_dir)
}

/// Inputs of `eval`: row-aligned pooled embeddings for the images and for
/// the original and augmented captions.
#[derive(Debug, Clone)]
pub struct EvalInputs {
    pub images: PathBuf,
    pub baseline_text: PathBuf,
    pub augmented_text: PathBuf,
    /// When given, its length must match the embeddings.
    pub manifest: Option<PathBuf>,
    /// `captions.jsonl` from `augment`; must follow manifest order.
    pub captions: Option<PathBuf>,
    /// Directory for the two trained checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub metrics: RetrievalMetrics,
    pub final_epoch_loss: Option<f64>,
    pub gamma: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricDelta {
    pub i2t: BTreeMap<usize, f64>,
    pub t2i: BTreeMap<usize, f64>,
    pub mean_recall: f64,
    pub rsum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub baseline: ConditionReport,
    pub augmented: ConditionReport,
    /// Augmented minus baseline.
    pub delta: MetricDelta,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Seeded split of `0..z` into (train, test) index lists.
pub fn split_indices(z: usize, test_size: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..z).collect();
    DetRng::new(seed).shuffle(&mut idx);
    let train = idx.split_off(test_size);
    (train, idx)
}

fn condition(
    txt: &Matrix,
    img: &Matrix,
    train_idx: &[usize],
    test_idx: &[usize],
    cfg: &PipelineConfig,
) -> Result<(ConditionReport, c3_core::TrainState), PipelineError> {
    let err = |e: String| PipelineError::Eval(e);
    let state = train(
        &txt.select_rows(train_idx),
        &img.select_rows(train_idx),
        &cfg.train.train_config(),
    )
    .map_err(|e| err(e.to_string()))?;
    let sim = state
        .similarity_matrix(&txt.select_rows(test_idx), &img.select_rows(test_idx))
        .map_err(|e| err(e.to_string()))?;
    let metrics = evaluate(&sim, &cfg.train.ks).map_err(|e| err(e.to_string()))?;
    Ok((
        ConditionReport {
            metrics,
            final_epoch_loss: state.epoch_losses.last().copied(),
            gamma: state.gamma(),
            steps: state.step,
        },
        state,
    ))
}

/// Trains a baseline and an augmented model on the same split and
/// reports held-out retrieval metrics for both.
pub fn cmd_eval(inputs: &EvalInputs, cfg: &PipelineConfig) -> Result<EvalReport, PipelineError> {
    cfg.validate()?;
    let img = load_embeddings(&inputs.images)?;
    let base = load_embeddings(&inputs.baseline_text)?;
    let aug = load_embeddings(&inputs.augmented_text)?;
    for (m, kind, p) in [
        (&img, EmbeddingKind::PooledImage, &inputs.images),
        (&base, EmbeddingKind::PooledText, &inputs.baseline_text),
        (&aug, EmbeddingKind::PooledText, &inputs.augmented_text),
    ] {
        if m.kind() != kind {
            return Err(PipelineError::Eval(format!(
                "{}: expected {} embeddings, found {}",
                p.display(),
                kind.name(),
                m.kind().name()
            )));
        }
    }
    let z = img.count();
    if base.count() != z || aug.count() != z {
        return Err(PipelineError::Eval(format!(
            "row counts differ: {z} images, {} baseline texts, {} augmented texts",
            base.count(),
            aug.count()
        )));
    }
    let mut warnings = Vec::new();
    if let Some(m) = &inputs.manifest {
        let samples = load_manifest(m)?;
        if samples.len() != z {
            return Err(PipelineError::Eval(format!(
                "manifest has {} samples but embeddings have {z} rows",
                samples.len()
            )));
        }
        if let Some(c) = &inputs.captions {
            warnings.extend(check_captions(c, &samples)?);
        }
    }
    let test_size = cfg.train.test_size.unwrap_or(z / 4);
    if test_size < 2 || z < test_size + 2 {
        return Err(PipelineError::Eval(format!(
            "split sizes must both be at least 2 (pairs {z}, test {test_size})"
        )));
    }
    let (train_idx, test_idx) = split_indices(z, test_size, cfg.train.seed);
    let (baseline, s_base) = condition(base.payload(), img.payload(), &train_idx, &test_idx, cfg)?;
    let (augmented, s_aug) = condition(aug.payload(), img.payload(), &train_idx, &test_idx, cfg)?;
    if let Some(dir) = &inputs.checkpoint_dir {
        save_checkpoint(&dir.join("baseline.c3ck"), &s_base)?;
        save_checkpoint(&dir.join("augmented.c3ck"), &s_aug)?;
    }
    let diff = |a: &BTreeMap<usize, f64>, b: &BTreeMap<usize, f64>| -> BTreeMap<usize, f64> {
        a.iter().map(|(k, v)| (*k, v - b[k])).collect()
    };
    let delta = MetricDelta {
        i2t: diff(&augmented.metrics.i2t.recall_at, &baseline.metrics.i2t.recall_at),
        t2i: diff(&augmented.metrics.t2i.recall_at, &baseline.metrics.t2i.recall_at),
        mean_recall: augmented.metrics.mean_recall - baseline.metrics.mean_recall,
        rsum: augmented.metrics.rsum - baseline.metrics.rsum,
    };
    for w in baseline.metrics.warnings.iter() {
        if !warnings.contains(w) {
            warnings.push(w.clone());
        }
    }
    Ok(EvalReport {
        pairs: z,
        train_size: train_idx.len(),
        test_size,
        seed: cfg.train.seed,
        baseline,
        augmented,
        delta,
        warnings,
    })
}

/// Checks that `captions.jsonl` lines follow the manifest; returns
/// warnings about unverified or failed samples.
fn check_captions(path: &Path, samples: &[Sample]) -> Result<Vec<String>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Eval(format!("{}: {e}", path.display())))?;
    let lines: Vec<serde_json::Value> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(|e| PipelineError::Eval(format!("{}: {e}", path.display())))?;
    if lines.len() != samples.len() {
        return Err(PipelineError::Eval(format!(
            "{} has {} lines for {} samples",
            path.display(),
            lines.len(),
            samples.len()
        )));
    }
    let mut unverified = 0;
    let mut failed = 0;
    for (line, s) in lines.iter().zip(samples) {
        if line["sample_id"].as_str() != Some(s.id.as_str()) {
            return Err(PipelineError::Eval(format!(
                "{}: expected sample {} in manifest order",
                path.display(),
                s.id
            )));
        }
        if line.get("error").is_some() {
            failed += 1;
        } else if line["verified"] != serde_json::Value::Bool(true) {
            unverified += 1;
        }
    }
    let mut w = Vec::new();
    if failed > 0 {
        w.push(format!("{failed} sample(s) failed augmentation"));
    }
    if unverified > 0 {
        w.push(format!("{unverified} caption(s) are unverified"));
    }
    Ok(w)
}
