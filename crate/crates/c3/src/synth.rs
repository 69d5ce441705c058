//! Synthetic fixtures: paired retrieval embeddings, and an offline replay
//! fixture for the augmentation pipeline.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use c3_core::embedding::{normalize_rows, synth_embeddings, EmbeddingKind, EmbeddingMatrix};
use c3_core::rng::DetRng;
use c3_core::Matrix;
use serde::Serialize;

use crate::config::{Ablation, PipelineConfig};
use crate::embedding_io::{load_manifest, save_embeddings, write_atomic, Sample};
use crate::gateway::{ChatRequest, FnBackend, Gateway, RecordingBackend};
use crate::pipeline::{AugmentJob, PipelineError};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Write {
        path: path.to_path_buf(),
        source,
    }
}

/// Paired pooled embeddings for the retrieval check.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub images: EmbeddingMatrix,
    pub baseline_text: EmbeddingMatrix,
    pub augmented_text: EmbeddingMatrix,
}

/// Builds `pairs` image/text pairs in `dim` dimensions.
///
/// Image rows `i` are normalized standard normals. Baseline texts are
/// `t = normalize(i + sigma * n)` with independent standard normal noise
/// `n`; augmented texts are `t' = normalize(0.7 t + 0.3 i)`. One
/// [`DetRng`] stream seeded with `seed` supplies the images (row-major)
/// and then the noise.
pub fn synth_eval_set(pairs: usize, dim: usize, sigma: f64, seed: u64) -> Result<EvalSet, String> {
    if pairs < 2 || dim == 0 {
        return Err(format!("need at least 2 pairs and dim >= 1, got {pairs}x{dim}"));
    }
    let mut rng = DetRng::new(seed);
    let raw: Vec<f64> = (0..pairs * dim).map(|_| rng.standard_normal()).collect();
    let img = normalize_rows(&Matrix::new(pairs, dim, raw).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let noisy: Vec<f64> = img
        .as_slice()
        .iter()
        .map(|v| v + sigma * rng.standard_normal())
        .collect();
    let txt = normalize_rows(&Matrix::new(pairs, dim, noisy).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mixed: Vec<f64> = txt
        .as_slice()
        .iter()
        .zip(img.as_slice())
        .map(|(t, i)| 0.7 * t + 0.3 * i)
        .collect();
    let aug = normalize_rows(&Matrix::new(pairs, dim, mixed).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let tag = |what: &str| format!("synth-eval:seed={seed}:sigma={sigma}:{what}");
    let wrap = |m, kind, what| EmbeddingMatrix::new(m, kind, tag(what)).map_err(|e| e.to_string());
    Ok(EvalSet {
        images: wrap(img, EmbeddingKind::PooledImage, "image")?,
        baseline_text: wrap(txt, EmbeddingKind::PooledText, "text")?,
        augmented_text: wrap(aug, EmbeddingKind::PooledText, "text_aug")?,
    })
}

pub const EVAL_IMAGES: &str = "images.c3em";
pub const EVAL_BASELINE: &str = "text.c3em";
pub const EVAL_AUGMENTED: &str = "text_aug.c3em";

pub fn write_eval_set(dir: &Path, set: &EvalSet) -> Result<(), PipelineError> {
    save_embeddings(&dir.join(EVAL_IMAGES), &set.images)?;
    save_embeddings(&dir.join(EVAL_BASELINE), &set.baseline_text)?;
    save_embeddings(&dir.join(EVAL_AUGMENTED), &set.augmented_text)?;
    Ok(())
}

/// A scripted sample for the replay fixture.
struct FixtureSample {
    id: &'static str,
    image_ref: &'static str,
    caption: &'static str,
    image_attributes: &'static str,
    text_attributes: &'static str,
    c1: &'static str,
    c2: &'static str,
    c3: &'static str,
    c4: &'static str,
    direct: &'static str,
}

const FIXTURE: [FixtureSample; 2] = [
    FixtureSample {
        id: "vase-001",
        image_ref: "images/vase-001.jpg",
        caption: "A blue-and-white porcelain vase holds peonies, a wish for wealth and honour.",
        image_attributes: "porcelain vase\npeony flowers\nwooden table\nblue-and-white pattern",
        text_attributes: "Porcelain vase, peonies, blue-and-white pattern",
        c1: "A blue-and-white porcelain vase holds pink peony flowers.",
        c2: "The vase stands on a wooden table. The peony flowers rise out of the vase.",
        c3: "The porcelain vase is the central object. The peony flowers fill the vase. \
             The wooden table supports the vase. The blue-and-white pattern covers the vase body. \
             The peonies are pink.",
        c4: "A blue-and-white porcelain vase filled with pink peony flowers stands on a wooden table.",
        direct: "A porcelain vase with peonies on a wooden table.",
    },
    FixtureSample {
        id: "kite-002",
        image_ref: "images/kite-002.jpg",
        caption: "老人在湖边放风筝，寓意步步高升。",
        image_attributes: "老人\n风筝\n湖\n柳树",
        text_attributes: "老人，风筝，湖边",
        c1: "一位老人在湖边放风筝。",
        c2: "老人站在湖边。风筝在老人上方的空中。柳树位于湖岸。",
        c3: "老人是画面的主体。风筝在空中飞。湖在老人身后。柳树长在湖岸。湖边是老人所在的位置。",
        c4: "一位老人站在柳树环绕的湖边，手牵风筝线，风筝在空中高高飞起。",
        direct: "老人在湖边放风筝。",
    },
];

/// Rule-based stand-in for a vision-language model: answers fixture
/// requests by their tag and says Yes to every verification question.
pub fn fixture_responder(req: &ChatRequest) -> String {
    let mut parts = req.request_tag.split(':');
    let id = parts.next().unwrap_or("");
    let Some(s) = FIXTURE.iter().find(|s| s.id == id) else {
        return String::new();
    };
    match (parts.next(), parts.next()) {
        (Some("extract"), Some("image")) => s.image_attributes.into(),
        (Some("extract"), Some("text")) => s.text_attributes.into(),
        (Some(_), Some("C1")) => s.c1.into(),
        (Some(_), Some("C2")) => s.c2.into(),
        (Some(_), Some("C3")) => s.c3.into(),
        (Some(_), Some("C4")) => s.c4.into(),
        (Some(_), Some("direct")) => s.direct.into(),
        (Some(_), Some("verify")) => "Yes.".into(),
        _ => String::new(),
    }
}

pub const FIXTURE_REGION_DIM: usize = 24;
pub const FIXTURE_ATTRIBUTE_DIM: usize = 16;
const FIXTURE_REGIONS: usize = 6;

#[derive(Serialize)]
struct ManifestLine<'a> {
    id: &'a str,
    image_ref: &'a str,
    caption: &'a str,
    image_embedding_ref: String,
    attribute_embedding_ref: String,
}

pub const FIXTURE_CONFIG: &str = "\
[gateway]
replay_script = \"replay.json\"
parallelism = 2

[completeness]
seed = 42
";

/// Writes a complete offline fixture into `dir`: `manifest.jsonl`,
/// embedding files under `emb/`, `config.toml`, and `replay.json` covering
/// the full pipeline and each ablation.
pub fn build_replay_fixture(dir: &Path) -> Result<PathBuf, PipelineError> {
    std::fs::create_dir_all(dir.join("emb")).map_err(io_err(dir))?;
    let recorder = Arc::new(RecordingBackend::new(FnBackend::new("fixture", fixture_responder)));
    let gateway = Gateway::new(Box::new(recorder.clone()));
    let cfg = PipelineConfig::default();
    let templates = cfg.templates()?;
    let bank = cfg.question_bank()?;

    let mut manifest = Vec::new();
    for (k, s) in FIXTURE.iter().enumerate() {
        let sample = Sample {
            id: s.id.into(),
            image_ref: s.image_ref.into(),
            caption: s.caption.into(),
            image_embedding_ref: PathBuf::new(),
            attribute_embedding_ref: None,
        };
        let job = AugmentJob {
            cfg: &cfg,
            templates: &templates,
            bank: &bank,
        };
        let (pool, _) = job.build_pool(&sample, &gateway).map_err(PipelineError::Eval)?;
        let seed = 1000 + 10 * k as u64;
        let regions = synth_embeddings(seed, FIXTURE_REGIONS, FIXTURE_REGION_DIM, EmbeddingKind::VisualRegions)
            .map_err(|e| PipelineError::Eval(e.to_string()))?;
        let attrs = synth_embeddings(
            seed + 1,
            pool.len(),
            FIXTURE_ATTRIBUTE_DIM,
            EmbeddingKind::AttributeTexts,
        )
        .map_err(|e| PipelineError::Eval(e.to_string()))?;
        let v_ref = format!("emb/{}.regions.c3em", s.id);
        let e_ref = format!("emb/{}.attributes.c3em", s.id);
        save_embeddings(&dir.join(&v_ref), &regions)?;
        save_embeddings(&dir.join(&e_ref), &attrs)?;
        let line = ManifestLine {
            id: s.id,
            image_ref: s.image_ref,
            caption: s.caption,
            image_embedding_ref: v_ref,
            attribute_embedding_ref: e_ref,
        };
        manifest.push(serde_json::to_string(&line).expect("serializes"));
    }
    let manifest_path = dir.join("manifest.jsonl");
    write_atomic(&manifest_path, format!("{}\n", manifest.join("\n")).as_bytes()).map_err(io_err(&manifest_path))?;
    let config_path = dir.join("config.toml");
    write_atomic(&config_path, FIXTURE_CONFIG.as_bytes()).map_err(io_err(&config_path))?;

    // drive every mode once so the script covers all requests
    let samples = load_manifest(&manifest_path)?;
    let modes = [
        Ablation::default(),
        Ablation {
            no_completeness: true,
            ..Ablation::default()
        },
        Ablation {
            no_cot: true,
            ..Ablation::default()
        },
        Ablation {
            no_consistency: true,
            ..Ablation::default()
        },
    ];
    for ablation in modes {
        let cfg = PipelineConfig {
            ablation,
            ..PipelineConfig::default()
        };
        let job = AugmentJob {
            cfg: &cfg,
            templates: &templates,
            bank: &bank,
        };
        let out = job.run(&samples, &gateway);
        if let Some(s) = out.summary.filter(|s| !s.ok()) {
            return Err(PipelineError::Eval(format!(
                "fixture run {ablation:?} failed on {} sample(s): {}",
                s.failed,
                String::from_utf8_lossy(&out.captions)
            )));
        }
    }
    let script = recorder.script();
    let replay_path = dir.join("replay.json");
    let mut bytes = serde_json::to_vec_pretty(&script).expect("serializes");
    bytes.push(b'\n');
    write_atomic(&replay_path, &bytes).map_err(io_err(&replay_path))?;
    Ok(manifest_path)
}
