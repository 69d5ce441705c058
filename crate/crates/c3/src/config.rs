//! Pipeline configuration, read from a TOML file and overridden by flags.
//!
//! Relative paths in a config file are resolved against the file's
//! directory. The `C3_API_KEY` environment variable overrides
//! `gateway.api_key`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use c3_core::attributes::MergeOptions;
use c3_core::completeness::{ProjectionInit, ProjectionSet};
use c3_core::mdp::Policy;
use c3_core::retrieval::TrainConfig;
use c3_core::Matrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{
    load_replay_script, Gateway, GatewayError, HttpBackend, ReplayBackend, ResponseCache, RetryPolicy,
};
use crate::templates::{Language, QuestionBank, TemplateError, Templates};

pub const API_KEY_ENV: &str = "C3_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    /// Remote OpenAI-compatible endpoint.
    pub base_url: Option<String>,
    pub api_key: Option<String>,
    /// Offline replay script; exclusive with `base_url`.
    pub replay_script: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub parallelism: usize,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub retry_base_ms: u64,
    pub extractor_model: String,
    pub generator_model: String,
    pub verifier_model: String,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            base_url: None,
            api_key: None,
            replay_script: None,
            cache_dir: None,
            parallelism: 4,
            timeout_secs: 120,
            max_attempts: 5,
            retry_base_ms: 1000,
            extractor_model: "default".into(),
            generator_model: "default".into(),
            verifier_model: "default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletenessConfig {
    pub init: ProjectionInit,
    pub seed: u64,
    /// Defaults to `min(d_v, d_t)`.
    pub d_k: Option<usize>,
    /// JSON file with `w_q`, `w_k`, `w_q2`, `w_k2` as arrays of rows;
    /// required when `init = "file"`.
    pub projection_file: Option<PathBuf>,
    /// Include both attention maps in score reports.
    pub full_report: bool,
}

impl Default for CompletenessConfig {
    fn default() -> Self {
        Self {
            init: ProjectionInit::SeededOrthogonal,
            seed: 42,
            d_k: None,
            projection_file: None,
            full_report: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub language: Language,
    /// Directory whose files override the builtin templates by name.
    pub templates_dir: Option<PathBuf>,
    pub attribute_cap: usize,
    /// Merge attributes whose normalized similarity reaches this ratio.
    pub fuzzy_threshold: Option<f64>,
    pub extract_max_tokens: u32,
    pub stage_max_tokens: u32,
    pub caption_max_tokens: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            language: Language::En,
            templates_dir: None,
            attribute_cap: 32,
            fuzzy_threshold: None,
            extract_max_tokens: 256,
            stage_max_tokens: 512,
            caption_max_tokens: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// JSON question bank; the builtin bank for the template language
    /// otherwise.
    pub question_bank: Option<PathBuf>,
    pub policy: Policy,
    pub max_regen: u32,
    pub answer_max_tokens: u32,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            question_bank: None,
            policy: Policy::Exhaustive,
            max_regen: 3,
            answer_max_tokens: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub out_dim: Option<usize>,
    /// Held-out pairs; a quarter of the set when unset.
    pub test_size: Option<usize>,
    pub ks: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            out_dim: t.out_dim,
            test_size: None,
            ks: c3_core::retrieval::DEFAULT_KS.to_vec(),
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            out_dim: self.out_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Skip scoring; every ASK costs 1.
    pub no_completeness: bool,
    /// One direct prompt instead of C1 to C4.
    pub no_cot: bool,
    /// Accept the generated caption without verification episodes.
    pub no_consistency: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub gateway: GatewayConfig,
    pub completeness: CompletenessConfig,
    pub augment: AugmentConfig,
    pub verify: VerifyConfig,
    pub train: TrainSection,
    pub ablation: Ablation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendMode<'a> {
    Remote { base_url: &'a str },
    Replay { script: &'a Path },
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

#[derive(Deserialize)]
struct ProjectionFile {
    w_q: Vec<Vec<f64>>,
    w_k: Vec<Vec<f64>>,
    w_q2: Vec<Vec<f64>>,
    w_k2: Vec<Vec<f64>>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        resolve(base, &mut cfg.gateway.replay_script);
        resolve(base, &mut cfg.gateway.cache_dir);
        resolve(base, &mut cfg.completeness.projection_file);
        resolve(base, &mut cfg.augment.templates_dir);
        resolve(base, &mut cfg.verify.question_bank);
        Ok(cfg)
    }

    /// Checks that do not depend on which command runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.gateway.base_url.is_some() && self.gateway.replay_script.is_some() {
            return invalid("gateway.base_url and gateway.replay_script are mutually exclusive");
        }
        if self.gateway.parallelism == 0 {
            return invalid("gateway.parallelism must be at least 1");
        }
        if self.gateway.max_attempts == 0 {
            return invalid("gateway.max_attempts must be at least 1");
        }
        if self.completeness.d_k == Some(0) {
            return invalid("completeness.d_k must be positive");
        }
        if self.completeness.init == ProjectionInit::File && self.completeness.projection_file.is_none() {
            return invalid("completeness.init = \"file\" needs completeness.projection_file");
        }
        if let Policy::Budgeted { budget } = self.verify.policy {
            if !(budget > 0.0 && budget.is_finite()) {
                return invalid("verify.policy budget must be positive");
            }
        }
        if let Some(t) = self.augment.fuzzy_threshold {
            if !(0.0..=1.0).contains(&t) {
                return invalid("augment.fuzzy_threshold must lie in [0, 1]");
            }
        }
        if self.augment.attribute_cap == 0 || self.augment.caption_max_tokens == 0 {
            return invalid("augment.attribute_cap and augment.caption_max_tokens must be positive");
        }
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite()) || t.batch_size < 2 || t.ks.is_empty() || t.ks.contains(&0) {
            return invalid("train needs lr >= 0, batch_size >= 2 and positive ks");
        }
        Ok(())
    }

    pub fn backend_mode(&self) -> Result<BackendMode<'_>, ConfigError> {
        match (&self.gateway.base_url, &self.gateway.replay_script) {
            (Some(url), None) => Ok(BackendMode::Remote { base_url: url }),
            (None, Some(p)) => Ok(BackendMode::Replay { script: p }),
            (Some(_), Some(_)) => Err(ConfigError::Invalid(
                "gateway.base_url and gateway.replay_script are mutually exclusive".into(),
            )),
            (None, None) => Err(ConfigError::Invalid(
                "no chat backend: set gateway.base_url or gateway.replay_script".into(),
            )),
        }
    }

    /// The key from `C3_API_KEY` if set, else from the file.
    pub fn api_key(&self) -> Option<String> {
        std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.is_empty())
            .or_else(|| self.gateway.api_key.clone())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.gateway.max_attempts,
            base_delay: Duration::from_millis(self.gateway.retry_base_ms),
            factor: 2.0,
        }
    }

    pub fn build_gateway(&self) -> Result<Gateway, ConfigError> {
        let gw = match self.backend_mode()? {
            BackendMode::Remote { base_url } => Gateway::new(Box::new(HttpBackend::new(
                base_url,
                self.api_key(),
                Duration::from_secs(self.gateway.timeout_secs),
            )?)),
            BackendMode::Replay { script } => Gateway::new(Box::new(ReplayBackend::new(load_replay_script(script)?))),
        };
        let gw = gw.with_retry(self.retry_policy());
        Ok(match &self.gateway.cache_dir {
            Some(dir) => gw.with_cache(ResponseCache::new(dir)),
            None => gw,
        })
    }

    pub fn templates(&self) -> Result<Templates, ConfigError> {
        Ok(Templates::load(
            self.augment.language,
            self.augment.templates_dir.as_deref(),
        )?)
    }

    pub fn question_bank(&self) -> Result<QuestionBank, ConfigError> {
        Ok(match &self.verify.question_bank {
            Some(p) => QuestionBank::load(p)?,
            None => QuestionBank::builtin(self.augment.language),
        })
    }

    pub fn merge_options(&self) -> MergeOptions {
        MergeOptions {
            fuzzy_threshold: self.augment.fuzzy_threshold,
        }
    }

    /// Projections for embeddings of widths `d_v` and `d_t`.
    pub fn projections(&self, d_v: usize, d_t: usize) -> Result<ProjectionSet, ConfigError> {
        let c = &self.completeness;
        let d_k = c.d_k.unwrap_or(d_v.min(d_t));
        let invalid = |e: String| ConfigError::Invalid(e);
        let set = match c.init {
            ProjectionInit::SeededOrthogonal => ProjectionSet::seeded_orthogonal(d_v, d_t, d_k, c.seed),
            ProjectionInit::IdentityIfSquare => ProjectionSet::identity(d_v, d_t, d_k),
            ProjectionInit::File => {
                let path = c.projection_file.as_ref().expect("checked by validate");
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                let f: ProjectionFile = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                    path: path.clone(),
                    msg: e.to_string(),
                })?;
                let m = |rows: &[Vec<f64>]| Matrix::from_rows(rows).map_err(|e| invalid(e.to_string()));
                let set =
                    ProjectionSet::from_parts(m(&f.w_q)?, m(&f.w_k)?, m(&f.w_q2)?, m(&f.w_k2)?, ProjectionInit::File)
                        .map_err(|e| invalid(e.to_string()))?;
                if set.d_v() != d_v || set.d_t() != d_t {
                    return Err(invalid(format!(
                        "projection file expects d_v={} d_t={}, embeddings have d_v={d_v} d_t={d_t}",
                        set.d_v(),
                        set.d_t()
                    )));
                }
                Ok(set)
            }
        };
        set.map_err(|e| invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> PipelineConfig {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn defaults() {
        let c = parse("");
        assert_eq!(c.gateway.parallelism, 4);
        assert_eq!(c.verify.max_regen, 3);
        assert_eq!(c.verify.policy, Policy::Exhaustive);
        assert_eq!(c.train.lr, 5e-5);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.augment.attribute_cap, 32);
        assert_eq!(c.augment.caption_max_tokens, 120);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn full_file() {
        let c = parse(
            r#"
            [gateway]
            replay_script = "replay.json"
            parallelism = 2
            [completeness]
            init = "identity_if_square"
            d_k = 8
            [augment]
            language = "zh"
            [verify]
            max_regen = 1
            policy = { kind = "budgeted", budget = 2.5 }
            [train]
            epochs = 5
            [ablation]
            no_cot = true
            "#,
        );
        assert_eq!(c.gateway.parallelism, 2);
        assert_eq!(c.completeness.init, ProjectionInit::IdentityIfSquare);
        assert_eq!(c.augment.language, Language::Zh);
        assert_eq!(c.verify.policy, Policy::Budgeted { budget: 2.5 });
        assert!(c.ablation.no_cot && !c.ablation.no_consistency);
        assert!(matches!(c.backend_mode().unwrap(), BackendMode::Replay { .. }));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<PipelineConfig>("[gateway]\nbase_ulr = \"x\"").is_err());
    }

    #[test]
    fn backends_are_exclusive() {
        let c = parse("[gateway]\nbase_url = \"http://x\"\nreplay_script = \"r.json\"");
        assert!(c.validate().is_err());
        assert!(c.backend_mode().is_err());
        assert!(parse("").backend_mode().is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[gateway]\nreplay_script = \"replay.json\"\n").unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.gateway.replay_script.unwrap(), dir.path().join("replay.json"));
    }

    #[test]
    fn bad_budget() {
        let c = parse("[verify]\npolicy = { kind = \"budgeted\", budget = 0.0 }");
        assert!(c.validate().is_err());
    }

    #[test]
    fn projection_defaults_to_min_dim() {
        let p = parse("").projections(6, 4).unwrap();
        assert_eq!(p.d_k, 4);
        assert_eq!(p.w_q.shape(), (6, 4));
    }

    #[test]
    fn projection_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("p.json");
        std::fs::write(
            &f,
            r#"{"w_q":[[1,0],[0,1]],"w_k":[[1,0],[0,1]],"w_q2":[[1,0],[0,1]],"w_k2":[[1,0],[0,1]]}"#,
        )
        .unwrap();
        let mut c = parse("[completeness]\ninit = \"file\"");
        assert!(c.validate().is_err());
        c.completeness.projection_file = Some(f);
        assert!(c.validate().is_ok());
        assert_eq!(c.projections(2, 2).unwrap().init, ProjectionInit::File);
        assert!(c.projections(3, 2).is_err());
    }
}
