//! Four-stage caption augmentation (C1 to C4) and feedback-driven
//! regeneration, plus the single-prompt variant used when the staged
//! chain is disabled.

use std::collections::BTreeMap;

use c3_core::attributes::AttributePool;
use c3_core::mdp::EpisodeTrace;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{request_digest_hex, Chat, ChatMessage, ChatRequest, GatewayError};
use crate::templates::{render, Templates};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    C1,
    C2,
    C3,
    C4,
    /// The single prompt that replaces C1 to C4 when the chain is off.
    #[serde(rename = "direct")]
    Direct,
}

impl Stage {
    pub const COT: [Stage; 4] = [Stage::C1, Stage::C2, Stage::C3, Stage::C4];

    /// 1-based position in the chain; `None` for [`Stage::Direct`].
    pub fn index(self) -> Option<u8> {
        match self {
            Stage::C1 => Some(1),
            Stage::C2 => Some(2),
            Stage::C3 => Some(3),
            Stage::C4 => Some(4),
            Stage::Direct => None,
        }
    }

    pub fn from_index(i: u8) -> Option<Stage> {
        Stage::COT.get(usize::from(i).checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::C1 => "C1",
            Stage::C2 => "C2",
            Stage::C3 => "C3",
            Stage::C4 => "C4",
            Stage::Direct => "direct",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    pub stage: Stage,
    /// Hex SHA-256 of the first request sent for this stage.
    pub prompt_digest: String,
    pub content: String,
    /// Number of requests it took (1 unless re-prompted).
    pub attempt: u32,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedCaption {
    pub sample_id: String,
    pub original: String,
    pub generation: u32,
    pub stages: BTreeMap<Stage, StageOutput>,
    #[serde(rename = "final")]
    pub final_caption: String,
}

impl AugmentedCaption {
    pub fn is_direct(&self) -> bool {
        self.stages.contains_key(&Stage::Direct)
    }

    /// All four chain stages present, or the direct output present.
    pub fn is_complete(&self) -> bool {
        self.is_direct() || Stage::COT.iter().all(|s| self.stages.contains_key(s))
    }

    /// Output examined by verification questions of 1-based `stage`. A
    /// direct caption answers for every stage.
    pub fn output_for(&self, stage: u8) -> &str {
        Stage::from_index(stage)
            .and_then(|s| self.stages.get(&s))
            .map_or(self.final_caption.as_str(), |o| o.content.as_str())
    }

    pub fn warnings(&self) -> impl Iterator<Item = &str> {
        self.stages.values().flat_map(|s| s.warnings.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSettings {
    pub model_id: String,
    /// Token budget sent with each stage request.
    pub max_tokens: u32,
    /// Maximum length of the final caption, in whitespace/CJK tokens.
    pub caption_max_tokens: usize,
    /// Replace C1 to C4 with a single direct prompt.
    pub direct: bool,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        Self {
            model_id: "default".into(),
            max_tokens: 512,
            caption_max_tokens: 120,
            direct: false,
        }
    }
}

/// Per-sample inputs shared by every stage.
#[derive(Debug, Clone, Copy)]
pub struct SampleContext<'a> {
    pub sample_id: &'a str,
    pub caption: &'a str,
    pub image_ref: &'a str,
    pub pool: &'a AttributePool,
}

#[derive(Debug, Error)]
pub enum AugmentErrorKind {
    #[error("attribute pool is empty")]
    EmptyPool,
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("gateway error in stage {stage}: {source}")]
    Gateway {
        stage: Stage,
        #[source]
        source: GatewayError,
    },
    #[error("stage {stage} failed: {msg}")]
    StageFailure { stage: Stage, msg: String },
}

/// An aborted augmentation with whatever stages had completed.
#[derive(Debug, Error)]
#[error("{sample_id}: {kind}")]
pub struct AugmentError {
    pub sample_id: String,
    pub kind: AugmentErrorKind,
    pub partial: BTreeMap<Stage, StageOutput>,
}

pub const FEEDBACK_HEADER: &str = "PREVIOUS VERIFICATION FAILURES:";

/// The corrective block injected into every prompt on regeneration.
pub fn feedback_block(traces: &[&EpisodeTrace]) -> Option<String> {
    let mut lines = Vec::new();
    for trace in traces {
        for step in trace.failures() {
            let stage = Stage::from_index(step.state.stage).map_or("?", Stage::name);
            lines.push(format!("- stage: {stage}"));
            lines.push(format!(
                "  question: {}",
                step.question.as_deref().unwrap_or("").replace('\n', " ")
            ));
            lines.push(format!(
                "  answer: {}",
                step.raw_answer.as_deref().unwrap_or("").replace('\n', " ")
            ));
        }
    }
    if lines.is_empty() {
        return None;
    }
    Some(format!("```\n{FEEDBACK_HEADER}\n{}\n```", lines.join("\n")))
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32, 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2FA1F)
}

/// Byte spans of the tokens in `text`: each CJK ideograph is a token, and
/// so is each whitespace-delimited run of other characters that contains
/// an alphanumeric. Pure punctuation is not counted.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut has_alnum = false;
    let flush = |start: &mut Option<usize>, end: usize, has_alnum: &mut bool, spans: &mut Vec<_>| {
        if let Some(s) = start.take() {
            if *has_alnum {
                spans.push((s, end));
            }
        }
        *has_alnum = false;
    };
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            flush(&mut start, i, &mut has_alnum, &mut spans);
        } else if is_cjk(c) {
            flush(&mut start, i, &mut has_alnum, &mut spans);
            spans.push((i, i + c.len_utf8()));
        } else {
            start.get_or_insert(i);
            has_alnum |= c.is_alphanumeric();
        }
    }
    flush(&mut start, text.len(), &mut has_alnum, &mut spans);
    spans
}

pub fn token_count(text: &str) -> usize {
    token_spans(text).len()
}

/// Cuts `text` after its `max`-th token, keeping trailing punctuation
/// attached to that token.
pub fn truncate_tokens(text: &str, max: usize) -> String {
    let spans = token_spans(text);
    if spans.len() <= max {
        return text.to_string();
    }
    if max == 0 {
        return String::new();
    }
    let mut end = spans[max - 1].1;
    for c in text[end..].chars() {
        if c.is_whitespace() || is_cjk(c) || c.is_alphanumeric() {
            break;
        }
        end += c.len_utf8();
    }
    text[..end].to_string()
}

/// Number of clauses: segments between sentence or clause terminators
/// (and line breaks) that contain an alphanumeric.
pub fn clause_count(text: &str) -> usize {
    text.split(['.', ';', '!', '?', '\n', '。', '；', '！', '？'])
        .filter(|seg| seg.chars().any(char::is_alphanumeric))
        .count()
}

/// Joins lines into one paragraph. Adjacent lines are joined with a space
/// unless the break sits between two non-ASCII characters (CJK text has
/// no inter-word spaces).
pub fn single_paragraph(text: &str) -> String {
    let mut out = String::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let (Some(prev), Some(next)) = (out.chars().last(), line.chars().next()) {
            if prev.is_ascii() || next.is_ascii() {
                out.push(' ');
            }
        }
        out.push_str(line);
    }
    out
}

const LABELS: [&str; 17] = [
    "output",
    "answer",
    "caption",
    "final caption",
    "rewritten caption",
    "relations",
    "reasoning",
    "attribute reasoning",
    "response",
    "输出",
    "答案",
    "描述",
    "最终描述",
    "改写描述",
    "关系",
    "属性推理",
    "回答",
];

fn is_label(label: &str) -> bool {
    let l = label.trim().to_lowercase();
    let l = l.trim_matches(|c: char| c == '*' || c == '#' || c.is_whitespace());
    if LABELS.contains(&l) {
        return true;
    }
    // "C3", "Stage C3", "Stage 3", optionally followed by a parenthetical
    let l = l.strip_prefix("stage").unwrap_or(l).trim();
    let l = l.strip_prefix("阶段").unwrap_or(l).trim();
    let head: String = l.chars().take_while(|c| *c != '(' && *c != '（').collect();
    let head = head.trim();
    let head = head.strip_prefix('c').unwrap_or(head);
    matches!(head, "1" | "2" | "3" | "4")
}

/// Removes template scaffolding the model may echo back: code fences,
/// lone XML-style tags, and a leading "Label:" prefix.
pub fn strip_scaffolding(reply: &str) -> String {
    let kept: Vec<&str> = reply
        .lines()
        .filter(|l| {
            let t = l.trim();
            let is_fence = t.starts_with("```");
            let is_tag = t.starts_with('<')
                && t.ends_with('>')
                && t[1..t.len() - 1]
                    .trim_start_matches('/')
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
                && t.len() > 2;
            !is_fence && !is_tag
        })
        .collect();
    let mut text = kept.join("\n").trim().to_string();
    if let Some((pos, sep)) = text.char_indices().take(40).find(|(_, c)| *c == ':' || *c == '：') {
        let first_line_break = text.find('\n').unwrap_or(text.len());
        if pos < first_line_break && is_label(&text[..pos]) {
            text = text[pos + sep.len_utf8()..].trim().to_string();
        }
    }
    text
}

pub struct Augmenter<'a> {
    templates: &'a Templates,
    settings: AugmentSettings,
}

impl<'a> Augmenter<'a> {
    pub fn new(templates: &'a Templates, settings: AugmentSettings) -> Self {
        Self { templates, settings }
    }

    pub fn settings(&self) -> &AugmentSettings {
        &self.settings
    }

    fn attribute_list(pool: &AttributePool) -> String {
        pool.texts().collect::<Vec<_>>().join("; ")
    }

    fn initial_request(
        &self,
        stage: Stage,
        ctx: &SampleContext<'_>,
        priors: &BTreeMap<Stage, StageOutput>,
        feedback: Option<&str>,
        generation: u32,
    ) -> ChatRequest {
        let template = self.templates.stage(stage);
        let prior = |s: Stage| priors.get(&s).map_or("", |o| o.content.as_str());
        let attributes = Self::attribute_list(ctx.pool);
        let max_tokens = self.settings.caption_max_tokens.to_string();
        let vars = [
            ("caption", ctx.caption),
            ("attributes", attributes.as_str()),
            ("c1", prior(Stage::C1)),
            ("c2", prior(Stage::C2)),
            ("c3", prior(Stage::C3)),
            ("feedback", feedback.unwrap_or("")),
            ("max_tokens", max_tokens.as_str()),
        ];
        let mut messages = Vec::new();
        if !template.system.is_empty() {
            messages.push(ChatMessage::system(render(&template.system, &vars)));
        }
        messages.push(ChatMessage::user(render(&template.user, &vars)).with_image(ctx.image_ref));
        ChatRequest {
            model_id: self.settings.model_id.clone(),
            messages,
            temperature: 0.0,
            max_tokens: self.settings.max_tokens,
            request_tag: format!("{}:gen{generation}:{stage}", ctx.sample_id),
        }
    }

    fn follow_up(req: &ChatRequest, reply: &str, instruction: String, suffix: &str) -> ChatRequest {
        let mut next = req.clone();
        next.messages.push(ChatMessage {
            role: crate::gateway::Role::Assistant,
            content: reply.to_string(),
            image_ref: None,
        });
        next.messages.push(ChatMessage::user(instruction));
        next.request_tag = format!("{}:{suffix}", req.request_tag);
        next
    }

    /// Runs one stage: a single request at temperature 0, with at most one
    /// corrective re-prompt.
    pub fn run_stage(
        &self,
        stage: Stage,
        ctx: &SampleContext<'_>,
        priors: &BTreeMap<Stage, StageOutput>,
        feedback: Option<&str>,
        generation: u32,
        chat: &dyn Chat,
    ) -> Result<StageOutput, AugmentErrorKind> {
        if let Some(i) = stage.index() {
            for prev in &Stage::COT[..usize::from(i - 1)] {
                if !priors.contains_key(prev) {
                    return Err(AugmentErrorKind::Precondition(format!(
                        "{stage} requested before {prev}"
                    )));
                }
            }
        }
        let gw = |source| AugmentErrorKind::Gateway { stage, source };
        let req = self.initial_request(stage, ctx, priors, feedback, generation);
        let prompt_digest = request_digest_hex(&req);
        let mut attempt = 1;
        let mut warnings = Vec::new();

        let raw = chat.chat(&req).map_err(gw)?.content;
        let mut content = strip_scaffolding(&raw);
        let mut last_req = req;
        let mut last_raw = raw;
        if content.is_empty() {
            let retry = Self::follow_up(
                &last_req,
                &last_raw,
                self.templates.reprompt_empty.clone(),
                "retry-empty",
            );
            attempt += 1;
            last_raw = chat.chat(&retry).map_err(gw)?.content;
            content = strip_scaffolding(&last_raw);
            last_req = retry;
            if content.is_empty() {
                return Err(AugmentErrorKind::StageFailure {
                    stage,
                    msg: "empty reply after re-prompt".into(),
                });
            }
        }

        match stage {
            Stage::C3 => {
                let limit = ctx.pool.len() + 2;
                let clauses = clause_count(&content);
                if clauses > limit {
                    let instruction = render(
                        &self.templates.reprompt_c3,
                        &[
                            ("clauses", &clauses.to_string()),
                            ("attribute_count", &ctx.pool.len().to_string()),
                        ],
                    );
                    let retry = Self::follow_up(&last_req, &last_raw, instruction, "retry-clauses");
                    attempt += 1;
                    let again = strip_scaffolding(&chat.chat(&retry).map_err(gw)?.content);
                    if !again.is_empty() {
                        content = again;
                    }
                    let clauses = clause_count(&content);
                    if clauses > limit {
                        warnings.push(format!(
                            "C3 accepted with {clauses} clauses for {} attributes (limit {limit})",
                            ctx.pool.len()
                        ));
                    }
                }
            }
            Stage::C4 | Stage::Direct => {
                let max = self.settings.caption_max_tokens;
                content = single_paragraph(&content);
                let length = token_count(&content);
                if length > max {
                    let instruction = render(
                        &self.templates.reprompt_c4,
                        &[("length", &length.to_string()), ("max_tokens", &max.to_string())],
                    );
                    let retry = Self::follow_up(&last_req, &last_raw, instruction, "retry-length");
                    attempt += 1;
                    let again = single_paragraph(&strip_scaffolding(&chat.chat(&retry).map_err(gw)?.content));
                    if !again.is_empty() {
                        content = again;
                    }
                    let length = token_count(&content);
                    if length > max {
                        content = truncate_tokens(&content, max);
                        warnings.push(format!("{stage} truncated from {length} to {max} tokens"));
                    }
                }
            }
            _ => {}
        }
        for w in &warnings {
            log::warn!("{}: {w}", ctx.sample_id);
        }
        Ok(StageOutput {
            stage,
            prompt_digest,
            content,
            attempt,
            warnings,
        })
    }

    fn run_all(
        &self,
        ctx: &SampleContext<'_>,
        feedback: Option<&str>,
        generation: u32,
        chat: &dyn Chat,
    ) -> Result<AugmentedCaption, AugmentError> {
        let fail = |kind, partial| AugmentError {
            sample_id: ctx.sample_id.to_string(),
            kind,
            partial,
        };
        if ctx.pool.is_empty() {
            return Err(fail(AugmentErrorKind::EmptyPool, BTreeMap::new()));
        }
        let order: &[Stage] = if self.settings.direct {
            &[Stage::Direct]
        } else {
            &Stage::COT
        };
        let mut stages = BTreeMap::new();
        for &stage in order {
            match self.run_stage(stage, ctx, &stages, feedback, generation, chat) {
                Ok(out) => {
                    stages.insert(stage, out);
                }
                Err(kind) => return Err(fail(kind, stages)),
            }
        }
        let last = order[order.len() - 1];
        let final_caption = stages[&last].content.clone();
        Ok(AugmentedCaption {
            sample_id: ctx.sample_id.to_string(),
            original: ctx.caption.to_string(),
            generation,
            stages,
            final_caption,
        })
    }

    /// Generation 0: C1 to C4 in order (or the direct prompt).
    pub fn augment(&self, ctx: &SampleContext<'_>, chat: &dyn Chat) -> Result<AugmentedCaption, AugmentError> {
        self.run_all(ctx, None, 0, chat)
    }

    /// Re-runs every stage with the failed questions of `trace` injected as
    /// feedback; the generation is one past the trace's.
    pub fn regenerate(
        &self,
        ctx: &SampleContext<'_>,
        trace: &EpisodeTrace,
        chat: &dyn Chat,
    ) -> Result<AugmentedCaption, AugmentError> {
        let Some(feedback) = feedback_block(&[trace]) else {
            return Err(AugmentError {
                sample_id: ctx.sample_id.to_string(),
                kind: AugmentErrorKind::Precondition("trace has no failed question".into()),
                partial: BTreeMap::new(),
            });
        };
        self.run_all(ctx, Some(&feedback), trace.generation + 1, chat)
    }
}
