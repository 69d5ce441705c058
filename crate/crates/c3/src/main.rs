use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use c3::config::{BackendMode, PipelineConfig};
use c3::embedding_io::save_embeddings;
use c3::gateway::{Gateway, HttpBackend, RecordingBackend};
use c3::pipeline::{augment_with, cmd_augment, cmd_eval, cmd_score, EvalInputs, RunSummary};
use c3::synth::{build_replay_fixture, synth_eval_set, write_eval_set};
use c3::templates::Language;
use c3_core::completeness::ProjectionInit;
use c3_core::embedding::{synth_embeddings, EmbeddingKind};
use c3_core::mdp::Policy;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Caption completeness scoring, CoT augmentation with verification, and
/// retrieval evaluation.
#[derive(Parser)]
#[command(name = "c3", version)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log verbosity (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one coverage report per manifest sample (JSONL).
    Score {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        completeness: CompletenessFlags,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Augment and verify captions; writes captions, traces and call logs.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        gateway: GatewayFlags,
        #[command(flatten)]
        completeness: CompletenessFlags,
        #[command(flatten)]
        augment: AugmentFlags,
    },
    /// Train baseline and augmented heads and compare held-out recall.
    Eval {
        /// Pooled image embeddings.
        #[arg(long)]
        images: PathBuf,
        /// Pooled embeddings of the original captions.
        #[arg(long)]
        text: PathBuf,
        /// Pooled embeddings of the augmented captions.
        #[arg(long)]
        text_aug: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        captions: Option<PathBuf>,
        /// Metrics JSON destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Generate synthetic fixtures.
    Synth {
        #[command(subcommand)]
        what: SynthCommand,
    },
    /// Run `augment` against the remote backend and save every reply as a
    /// replay script.
    ReplayRecord {
        #[arg(long)]
        manifest: PathBuf,
        /// Replay script destination.
        #[arg(long)]
        out: PathBuf,
        /// Where to write the augment outputs of the recording run.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        gateway: GatewayFlags,
        #[command(flatten)]
        completeness: CompletenessFlags,
        #[command(flatten)]
        augment: AugmentFlags,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    /// One embedding file of standard normals (rows normalized for pooled kinds).
    Embeddings {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired image, baseline-text and augmented-text embeddings.
    EvalSet {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Noise scale of the baseline texts.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Manifest, embeddings, config and replay script for offline runs.
    ReplayFixture {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    VisualRegions,
    AttributeTexts,
    PooledText,
    PooledImage,
}

impl From<KindArg> for EmbeddingKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::VisualRegions => EmbeddingKind::VisualRegions,
            KindArg::AttributeTexts => EmbeddingKind::AttributeTexts,
            KindArg::PooledText => EmbeddingKind::PooledText,
            KindArg::PooledImage => EmbeddingKind::PooledImage,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    SeededOrthogonal,
    Identity,
    File,
}

#[derive(Clone, Copy, ValueEnum)]
enum LangArg {
    En,
    Zh,
}

#[derive(Args)]
struct GatewayFlags {
    #[arg(long, conflicts_with = "replay_script")]
    base_url: Option<String>,
    #[arg(long)]
    replay_script: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    extractor_model: Option<String>,
    #[arg(long)]
    generator_model: Option<String>,
    #[arg(long)]
    verifier_model: Option<String>,
    /// Base retry delay in milliseconds.
    #[arg(long)]
    retry_base_ms: Option<u64>,
}

#[derive(Args)]
struct CompletenessFlags {
    #[arg(long, value_enum)]
    projection_init: Option<InitArg>,
    #[arg(long)]
    projection_file: Option<PathBuf>,
    #[arg(long)]
    projection_seed: Option<u64>,
    #[arg(long)]
    d_k: Option<usize>,
    /// Include both attention maps in reports.
    #[arg(long)]
    full_report: bool,
}

#[derive(Args)]
struct AugmentFlags {
    #[arg(long, value_enum)]
    language: Option<LangArg>,
    #[arg(long)]
    templates_dir: Option<PathBuf>,
    #[arg(long)]
    question_bank: Option<PathBuf>,
    #[arg(long)]
    max_regen: Option<u32>,
    /// Switch to the budgeted verification policy with this budget.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    caption_max_tokens: Option<usize>,
    #[arg(long)]
    fuzzy_threshold: Option<f64>,
    /// Every verification question costs 1; no scoring.
    #[arg(long)]
    no_completeness: bool,
    /// One direct prompt instead of the four-stage chain.
    #[arg(long)]
    no_cot: bool,
    /// Accept generated captions without verification.
    #[arg(long)]
    no_consistency: bool,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dim: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Comma-separated cutoffs, e.g. 1,5,10.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl GatewayFlags {
    fn apply(self, c: &mut PipelineConfig) {
        let g = &mut c.gateway;
        if self.base_url.is_some() {
            g.base_url = self.base_url;
            g.replay_script = None;
        }
        if self.replay_script.is_some() {
            g.replay_script = self.replay_script;
            g.base_url = None;
        }
        if self.cache_dir.is_some() {
            g.cache_dir = self.cache_dir;
        }
        set(&mut g.parallelism, self.parallelism);
        set(&mut g.extractor_model, self.extractor_model);
        set(&mut g.generator_model, self.generator_model);
        set(&mut g.verifier_model, self.verifier_model);
        set(&mut g.retry_base_ms, self.retry_base_ms);
    }
}

impl CompletenessFlags {
    fn apply(self, c: &mut PipelineConfig) {
        let p = &mut c.completeness;
        if let Some(init) = self.projection_init {
            p.init = match init {
                InitArg::SeededOrthogonal => ProjectionInit::SeededOrthogonal,
                InitArg::Identity => ProjectionInit::IdentityIfSquare,
                InitArg::File => ProjectionInit::File,
            };
        }
        if self.projection_file.is_some() {
            p.projection_file = self.projection_file;
        }
        set(&mut p.seed, self.projection_seed);
        if self.d_k.is_some() {
            p.d_k = self.d_k;
        }
        p.full_report |= self.full_report;
    }
}

impl AugmentFlags {
    fn apply(self, c: &mut PipelineConfig) {
        if let Some(l) = self.language {
            c.augment.language = match l {
                LangArg::En => Language::En,
                LangArg::Zh => Language::Zh,
            };
        }
        if self.templates_dir.is_some() {
            c.augment.templates_dir = self.templates_dir;
        }
        if self.question_bank.is_some() {
            c.verify.question_bank = self.question_bank;
        }
        set(&mut c.verify.max_regen, self.max_regen);
        if let Some(budget) = self.budget {
            c.verify.policy = Policy::Budgeted { budget };
        }
        set(&mut c.augment.caption_max_tokens, self.caption_max_tokens);
        if self.fuzzy_threshold.is_some() {
            c.augment.fuzzy_threshold = self.fuzzy_threshold;
        }
        c.ablation.no_completeness |= self.no_completeness;
        c.ablation.no_cot |= self.no_cot;
        c.ablation.no_consistency |= self.no_consistency;
    }
}

impl TrainFlags {
    fn apply(self, c: &mut PipelineConfig) {
        let t = &mut c.train;
        set(&mut t.lr, self.lr);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.epochs, self.epochs);
        set(&mut t.seed, self.seed);
        if self.out_dim.is_some() {
            t.out_dim = self.out_dim;
        }
        if self.test_size.is_some() {
            t.test_size = self.test_size;
        }
        set(&mut t.ks, self.ks);
    }
}

/// Exit status: 0 success, 1 some samples failed, 2 the run itself failed.
fn batch_status(what: &str, s: RunSummary) -> ExitCode {
    if s.ok() {
        log::info!("{what}: {} sample(s) done", s.total);
        ExitCode::SUCCESS
    } else {
        eprintln!("{what}: {} of {} sample(s) failed", s.failed, s.total);
        ExitCode::from(1)
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Score {
            manifest,
            out,
            completeness,
            parallelism,
        } => {
            completeness.apply(&mut cfg);
            set(&mut cfg.gateway.parallelism, parallelism);
            Ok(batch_status("score", cmd_score(&manifest, &cfg, &out)?))
        }
        Command::Augment {
            manifest,
            out_dir,
            gateway,
            completeness,
            augment,
        } => {
            gateway.apply(&mut cfg);
            completeness.apply(&mut cfg);
            augment.apply(&mut cfg);
            Ok(batch_status("augment", cmd_augment(&manifest, &cfg, &out_dir)?))
        }
        Command::Eval {
            images,
            text,
            text_aug,
            manifest,
            captions,
            out,
            checkpoint_dir,
            train,
        } => {
            train.apply(&mut cfg);
            let inputs = EvalInputs {
                images,
                baseline_text: text,
                augmented_text: text_aug,
                manifest,
                captions,
                checkpoint_dir,
            };
            let report = cmd_eval(&inputs, &cfg)?;
            let mut json = serde_json::to_string_pretty(&report)?;
            json.push('\n');
            match out {
                Some(p) => c3::embedding_io::write_atomic(&p, json.as_bytes())?,
                None => print!("{json}"),
            }
            for w in &report.warnings {
                log::warn!("{w}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { what } => {
            match what {
                SynthCommand::Embeddings {
                    kind,
                    count,
                    dim,
                    seed,
                    out,
                } => {
                    let m = synth_embeddings(seed, count, dim, kind.into())?;
                    save_embeddings(&out, &m)?;
                }
                SynthCommand::EvalSet {
                    out_dir,
                    pairs,
                    dim,
                    sigma,
                    seed,
                } => write_eval_set(&out_dir, &synth_eval_set(pairs, dim, sigma, seed)?)?,
                SynthCommand::ReplayFixture { out_dir } => {
                    build_replay_fixture(&out_dir)?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ReplayRecord {
            manifest,
            out,
            out_dir,
            gateway,
            completeness,
            augment,
        } => {
            gateway.apply(&mut cfg);
            completeness.apply(&mut cfg);
            augment.apply(&mut cfg);
            record(&manifest, &cfg, &out, out_dir.as_deref())
        }
    }
}

/// Live run through a recording backend. The response cache is bypassed
/// so that every request reaches the backend and is captured.
fn record(
    manifest: &Path,
    cfg: &PipelineConfig,
    out: &Path,
    out_dir: Option<&Path>,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    cfg.validate()?;
    let BackendMode::Remote { base_url } = cfg.backend_mode()? else {
        return Err("replay-record needs a remote backend (gateway.base_url or --base-url)".into());
    };
    let http = HttpBackend::new(base_url, cfg.api_key(), Duration::from_secs(cfg.gateway.timeout_secs))?;
    let recorder = Arc::new(RecordingBackend::new(http));
    let gateway = Gateway::new(Box::new(recorder.clone())).with_retry(cfg.retry_policy());
    let scratch;
    let dir = match out_dir {
        Some(d) => d,
        None => {
            scratch = tempfile::tempdir()?;
            scratch.path()
        }
    };
    let summary = augment_with(manifest, cfg, &gateway, dir)?;
    let mut bytes = serde_json::to_vec_pretty(&recorder.script())?;
    bytes.push(b'\n');
    c3::embedding_io::write_atomic(out, &bytes)?;
    Ok(batch_status("replay-record", summary))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
