//! Verification episodes over an augmented caption and the
//! regenerate-until-accepted loop.

use c3_core::attributes::AttributePool;
use c3_core::mdp::{drive_episode, Asked, EpisodeTrace, Policy, Verdict};
use thiserror::Error;

use crate::augmenter::{AugmentError, AugmentedCaption, Augmenter, SampleContext};
use crate::gateway::{Chat, ChatMessage, ChatRequest, GatewayError};
use crate::templates::{render, QuestionBank, Templates};

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySettings {
    pub model_id: String,
    pub max_tokens: u32,
    pub policy: Policy,
    pub max_regen: u32,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            model_id: "default".into(),
            max_tokens: 16,
            policy: Policy::Exhaustive,
            max_regen: 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("caption for {0} is incomplete")]
    Incomplete(String),
    #[error("budget must be positive, got {0}")]
    Budget(f64),
    #[error("question bank has no question for stage {stage} cursor {cursor}")]
    Bank { stage: u8, cursor: usize },
    /// A gateway failure mid-episode, with the steps taken so far.
    #[error("gateway error during verification: {source}")]
    Gateway {
        trace: Box<EpisodeTrace>,
        #[source]
        source: GatewayError,
    },
}

/// Fills a question template for one stage.
pub fn render_question(template: &str, caption: &AugmentedCaption, pool: &AttributePool, stage: u8) -> String {
    let attributes = pool.texts().collect::<Vec<_>>().join(", ");
    render(
        template,
        &[
            ("caption", caption.final_caption.as_str()),
            ("attribute", attributes.as_str()),
            ("stage_output", caption.output_for(stage)),
        ],
    )
}

enum AskError {
    Bank { stage: u8, cursor: usize },
    Gateway(GatewayError),
}

/// One verification episode: questions in bank order at temperature 0,
/// each ASK charged `cost_per_ask`.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    caption: &AugmentedCaption,
    pool: &AttributePool,
    image_ref: &str,
    bank: &QuestionBank,
    templates: &Templates,
    chat: &dyn Chat,
    cost_per_ask: f64,
    settings: &VerifySettings,
) -> Result<EpisodeTrace, EpisodeError> {
    if !caption.is_complete() {
        return Err(EpisodeError::Incomplete(caption.sample_id.clone()));
    }
    if let Policy::Budgeted { budget } = settings.policy {
        if budget.is_nan() || budget <= 0.0 {
            return Err(EpisodeError::Budget(budget));
        }
    }
    let counts = bank.counts();
    let generation = caption.generation;
    let ask = |stage: u8, cursor: usize| -> Result<Asked, AskError> {
        let template = bank.question(stage, cursor).ok_or(AskError::Bank { stage, cursor })?;
        let question = render_question(template, caption, pool, stage);
        let tpl = &templates.verify;
        let vars = [("question", question.as_str())];
        let mut messages = Vec::new();
        if !tpl.system.is_empty() {
            messages.push(ChatMessage::system(render(&tpl.system, &vars)));
        }
        messages.push(ChatMessage::user(render(&tpl.user, &vars)).with_image(image_ref));
        let req = ChatRequest {
            model_id: settings.model_id.clone(),
            messages,
            temperature: 0.0,
            max_tokens: settings.max_tokens,
            request_tag: format!("{}:gen{generation}:verify:C{stage}:{cursor}", caption.sample_id),
        };
        let reply = chat.chat(&req).map_err(AskError::Gateway)?;
        Ok(Asked {
            question,
            raw_answer: reply.content,
        })
    };
    drive_episode(
        &caption.sample_id,
        generation,
        &counts,
        cost_per_ask,
        settings.policy,
        ask,
    )
    .map_err(|(trace, e)| match e {
        AskError::Bank { stage, cursor } => EpisodeError::Bank { stage, cursor },
        AskError::Gateway(source) => EpisodeError::Gateway {
            trace: Box::new(trace),
            source,
        },
    })
}

/// Result of [`evaluate_with_retries`].
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub caption: AugmentedCaption,
    /// One per episode, in order.
    pub traces: Vec<EpisodeTrace>,
    /// False when no episode accepted and `caption` is the fallback.
    pub verified: bool,
}

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("{0}")]
    Episode(#[from] EpisodeError),
}

/// Failure of [`evaluate_with_retries`], with the traces completed before it.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct EvaluateFailure {
    pub error: Box<EvaluateError>,
    pub traces: Vec<EpisodeTrace>,
}

/// Augments, verifies, and regenerates with feedback until an episode
/// accepts or `max_regen` regenerations are spent.
///
/// Without an accepting episode the candidate with the most Yes answers is
/// returned (ties go to the later generation) and marked unverified. A
/// budget-exhausted episode has no failed question to feed back, so it
/// also ends the loop.
pub fn evaluate_with_retries(
    augmenter: &Augmenter<'_>,
    ctx: &SampleContext<'_>,
    bank: &QuestionBank,
    templates: &Templates,
    chat: &dyn Chat,
    cost_per_ask: f64,
    settings: &VerifySettings,
) -> Result<Evaluation, EvaluateFailure> {
    let mut traces: Vec<EpisodeTrace> = Vec::new();
    let mut candidates: Vec<AugmentedCaption> = Vec::new();
    macro_rules! attempt {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => {
                    return Err(EvaluateFailure {
                        error: Box::new(e.into()),
                        traces,
                    })
                }
            }
        };
    }
    let mut candidate = attempt!(augmenter.augment(ctx, chat));
    loop {
        let trace = attempt!(run_episode(
            &candidate,
            ctx.pool,
            ctx.image_ref,
            bank,
            templates,
            chat,
            cost_per_ask,
            settings,
        ));
        let accepted = trace.verdict == Verdict::Accepted;
        let can_retry = trace.failures().next().is_some();
        traces.push(trace);
        candidates.push(candidate);
        if accepted {
            return Ok(Evaluation {
                caption: candidates.pop().expect("just pushed"),
                traces,
                verified: true,
            });
        }
        if traces.len() as u32 > settings.max_regen || !can_retry {
            break;
        }
        candidate = attempt!(augmenter.regenerate(ctx, traces.last().unwrap(), chat));
    }
    let mut best = 0;
    for (i, t) in traces.iter().enumerate() {
        if t.yes_count() >= traces[best].yes_count() {
            best = i;
        }
    }
    log::warn!(
        "{}: no generation accepted after {} episode(s); keeping generation {} unverified",
        ctx.sample_id,
        traces.len(),
        candidates[best].generation
    );
    Ok(Evaluation {
        caption: candidates.swap_remove(best),
        traces,
        verified: false,
    })
}
