//! The verification automaton that supervises the four CoT stages.
//!
//! State `(stage, fail, cursor)`: the stage under evaluation (1..=4), the
//! fail flag, and the position in that stage's question list. Every ASK
//! costs `1 - S_complete`. A Yes advances the cursor and then the stage; a
//! No raises the fail flag and ends the episode with REJECT; a Yes to the
//! last question of stage 4 ends it with ACCEPT. Reward is 1 only on
//! ACCEPT.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::BinaryAnswer;

pub const STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MdpError {
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Ask,
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MdpState {
    /// Stage under evaluation, 1..=4.
    pub stage: u8,
    /// 1 once any question was answered No.
    pub fail: u8,
    /// Index of the pending question within the stage.
    pub cursor: usize,
    /// Set after ACCEPT or REJECT.
    #[serde(default)]
    pub terminal: bool,
}

impl MdpState {
    pub const INITIAL: MdpState = MdpState {
        stage: 1,
        fail: 0,
        cursor: 0,
        terminal: false,
    };
}

impl Default for MdpState {
    fn default() -> Self {
        Self::INITIAL
    }
}

/// Number of questions in each stage's bank; every entry is at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuestionCounts([usize; STAGES]);

impl QuestionCounts {
    pub fn new(counts: [usize; STAGES]) -> Result<Self, MdpError> {
        if let Some(i) = counts.iter().position(|c| *c == 0) {
            return Err(MdpError::Protocol(alloc::format!(
                "stage C{} has no verification questions",
                i + 1
            )));
        }
        Ok(Self(counts))
    }

    pub fn of_stage(&self, stage: u8) -> usize {
        self.0[usize::from(stage) - 1]
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

/// ASK cost `1 - s_complete`.
pub fn ask_cost(s_complete: f64) -> Result<f64, MdpError> {
    if !(0.0..=1.0).contains(&s_complete) {
        return Err(MdpError::Numeric(alloc::format!(
            "completeness {s_complete} outside [0, 1]"
        )));
    }
    Ok(1.0 - s_complete)
}

/// Advances the automaton on the answer to the pending question.
///
/// `answer` must be `Yes` or `No`; callers map `Unparseable` to `No` first.
pub fn step(state: MdpState, answer: BinaryAnswer, counts: &QuestionCounts) -> Result<(MdpState, Action), MdpError> {
    if state.terminal {
        return Err(MdpError::Protocol("step after terminal action".into()));
    }
    if !(1..=STAGES as u8).contains(&state.stage) || state.cursor >= counts.of_stage(state.stage) {
        return Err(MdpError::Protocol(alloc::format!(
            "invalid state {state:?} for question counts {:?}",
            counts.0
        )));
    }
    match answer {
        BinaryAnswer::Unparseable => Err(MdpError::Protocol(
            "unparseable answers must be resolved before stepping".into(),
        )),
        BinaryAnswer::No => Ok((
            MdpState {
                fail: 1,
                terminal: true,
                ..state
            },
            Action::Reject,
        )),
        BinaryAnswer::Yes if state.cursor + 1 < counts.of_stage(state.stage) => Ok((
            MdpState {
                cursor: state.cursor + 1,
                ..state
            },
            Action::Ask,
        )),
        BinaryAnswer::Yes if (state.stage as usize) < STAGES => Ok((
            MdpState {
                stage: state.stage + 1,
                cursor: 0,
                ..state
            },
            Action::Ask,
        )),
        BinaryAnswer::Yes => {
            if state.fail != 0 {
                return Err(MdpError::Protocol("ACCEPT with fail flag set".into()));
            }
            Ok((
                MdpState {
                    terminal: true,
                    ..state
                },
                Action::Accept,
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// Ask every question in bank order; cost is logged but never gates.
    Exhaustive,
    /// Stop and flag the episode once the next ASK would push the
    /// cumulative cost past `budget`.
    Budgeted { budget: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// State in which the action was taken.
    pub state: MdpState,
    pub action: Action,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub question: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw_answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub parsed_answer: Option<BinaryAnswer>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub sample_id: String,
    pub generation: u32,
    pub steps: Vec<TraceStep>,
    pub total_cost: f64,
    pub reward: u8,
    pub verdict: Verdict,
}

impl EpisodeTrace {
    pub fn ask_count(&self) -> usize {
        self.steps.iter().filter(|s| s.action == Action::Ask).count()
    }

    /// Number of questions answered Yes; the progress measure used to pick
    /// a fallback candidate.
    pub fn yes_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.parsed_answer == Some(BinaryAnswer::Yes))
            .count()
    }

    /// ASK steps whose answer was not Yes, with the stage they belong to.
    pub fn failures(&self) -> impl Iterator<Item = &TraceStep> {
        self.steps
            .iter()
            .filter(|s| s.action == Action::Ask && s.parsed_answer.is_some_and(|a| a != BinaryAnswer::Yes))
    }
}

/// What the question-asking callback returns for one ASK.
#[derive(Debug, Clone, PartialEq)]
pub struct Asked {
    pub question: String,
    pub raw_answer: String,
}

/// Result of [`drive_episode`]: a trace plus the error that interrupted
/// it, if any.
pub type DriveResult<E> = Result<EpisodeTrace, (EpisodeTrace, E)>;

/// Runs one episode to completion.
///
/// `ask(stage, cursor)` renders and poses the pending question and returns
/// the raw reply; replies are parsed with
/// [`crate::answer::parse_binary_answer`], and `Unparseable` is recorded
/// as such but stepped as No. On a callback error the partial trace is
/// returned alongside it.
pub fn drive_episode<E, F>(
    sample_id: &str,
    generation: u32,
    counts: &QuestionCounts,
    cost_per_ask: f64,
    policy: Policy,
    mut ask: F,
) -> DriveResult<E>
where
    F: FnMut(u8, usize) -> Result<Asked, E>,
{
    let mut trace = EpisodeTrace {
        sample_id: sample_id.into(),
        generation,
        steps: Vec::new(),
        total_cost: 0.0,
        reward: 0,
        verdict: Verdict::Rejected,
    };
    let mut state = MdpState::INITIAL;
    loop {
        if let Policy::Budgeted { budget } = policy {
            if trace.total_cost + cost_per_ask > budget {
                trace.verdict = Verdict::BudgetExhausted;
                return Ok(trace);
            }
        }
        let asked = match ask(state.stage, state.cursor) {
            Ok(a) => a,
            Err(e) => return Err((trace, e)),
        };
        let parsed = crate::answer::parse_binary_answer(&asked.raw_answer);
        let effective = if parsed == BinaryAnswer::Yes {
            BinaryAnswer::Yes
        } else {
            BinaryAnswer::No
        };
        trace.total_cost += cost_per_ask;
        trace.steps.push(TraceStep {
            state,
            action: Action::Ask,
            question: Some(asked.question),
            raw_answer: Some(asked.raw_answer),
            parsed_answer: Some(parsed),
            cost: cost_per_ask,
        });
        // the state is valid by construction, so step cannot fail here
        let (next, action) = step(state, effective, counts).expect("automaton invariant");
        state = next;
        match action {
            Action::Ask => continue,
            terminal => {
                trace.steps.push(TraceStep {
                    state,
                    action: terminal,
                    question: None,
                    raw_answer: None,
                    parsed_answer: None,
                    cost: 0.0,
                });
                if terminal == Action::Accept {
                    trace.verdict = Verdict::Accepted;
                    trace.reward = 1;
                } else {
                    trace.verdict = Verdict::Rejected;
                }
                return Ok(trace);
            }
        }
    }
}

/// Re-runs [`step`] over a trace's recorded answers and returns the
/// `(state, action)` sequence it produces, for comparison with the trace.
pub fn replay(trace: &EpisodeTrace, counts: &QuestionCounts) -> Result<Vec<(MdpState, Action)>, MdpError> {
    let mut out = Vec::new();
    let mut state = MdpState::INITIAL;
    for s in trace.steps.iter().filter(|s| s.action == Action::Ask) {
        out.push((state, Action::Ask));
        let answer = match s.parsed_answer {
            Some(BinaryAnswer::Yes) => BinaryAnswer::Yes,
            _ => BinaryAnswer::No,
        };
        let (next, action) = step(state, answer, counts)?;
        state = next;
        if action != Action::Ask {
            out.push((state, action));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn counts(c: [usize; 4]) -> QuestionCounts {
        QuestionCounts::new(c).unwrap()
    }

    #[test]
    fn ask_cost_values() {
        assert_eq!(ask_cost(1.0).unwrap(), 0.0);
        assert_eq!(ask_cost(0.0).unwrap(), 1.0);
        assert_eq!(ask_cost(0.75).unwrap(), 0.25);
        assert!(ask_cost(1.5).is_err());
        assert!(ask_cost(-0.1).is_err());
        assert!(ask_cost(f64::NAN).is_err());
    }

    #[test]
    fn yes_at_end_of_stage_advances() {
        let c = counts([2, 2, 2, 2]);
        let s = MdpState {
            cursor: 1,
            ..MdpState::INITIAL
        };
        let (next, a) = step(s, BinaryAnswer::Yes, &c).unwrap();
        assert_eq!(a, Action::Ask);
        assert_eq!((next.stage, next.fail, next.cursor), (2, 0, 0));
    }

    #[test]
    fn yes_within_stage_moves_cursor() {
        let c = counts([2, 2, 2, 2]);
        let (next, a) = step(MdpState::INITIAL, BinaryAnswer::Yes, &c).unwrap();
        assert_eq!(a, Action::Ask);
        assert_eq!((next.stage, next.cursor), (1, 1));
    }

    #[test]
    fn last_yes_accepts() {
        let c = counts([2, 2, 2, 2]);
        let s = MdpState {
            stage: 4,
            cursor: 1,
            ..MdpState::INITIAL
        };
        let (next, a) = step(s, BinaryAnswer::Yes, &c).unwrap();
        assert_eq!(a, Action::Accept);
        assert!(next.terminal);
        assert!(matches!(step(next, BinaryAnswer::Yes, &c), Err(MdpError::Protocol(_))));
    }

    #[test]
    fn no_rejects_from_any_state() {
        let c = counts([2, 1, 3, 2]);
        for stage in 1..=4u8 {
            for cursor in 0..c.of_stage(stage) {
                let s = MdpState {
                    stage,
                    cursor,
                    ..MdpState::INITIAL
                };
                let (next, a) = step(s, BinaryAnswer::No, &c).unwrap();
                assert_eq!(a, Action::Reject);
                assert_eq!(next.fail, 1);
                assert!(step(next, BinaryAnswer::Yes, &c).is_err());
            }
        }
    }

    #[test]
    fn empty_stage_rejected() {
        assert!(QuestionCounts::new([1, 0, 1, 1]).is_err());
    }

    fn scripted<'a>(answers: &'a [&'a str]) -> impl FnMut(u8, usize) -> Result<Asked, ()> + 'a {
        let mut i = 0;
        move |stage, cursor| {
            let a = answers[i];
            i += 1;
            Ok(Asked {
                question: alloc::format!("C{stage} q{cursor}"),
                raw_answer: a.into(),
            })
        }
    }

    #[test]
    fn all_yes_episode() {
        let c = counts([2, 2, 2, 2]);
        let answers = ["yes"; 8];
        let t = drive_episode("s", 0, &c, 0.25, Policy::Exhaustive, scripted(&answers)).unwrap();
        assert_eq!(t.ask_count(), 8);
        assert_eq!(t.steps.last().unwrap().action, Action::Accept);
        assert_eq!(t.reward, 1);
        assert_eq!(t.verdict, Verdict::Accepted);
        assert_eq!(t.total_cost, 8.0 * 0.25);
        let expected: Vec<_> = t.steps.iter().map(|s| (s.state, s.action)).collect();
        assert_eq!(replay(&t, &c).unwrap(), expected);
    }

    #[test]
    fn first_no_rejects() {
        let c = counts([2, 2, 2, 2]);
        let t = drive_episode("s", 0, &c, 0.5, Policy::Exhaustive, scripted(&["No."])).unwrap();
        assert_eq!(t.ask_count(), 1);
        assert_eq!(t.steps.len(), 2);
        assert_eq!(t.steps[1].action, Action::Reject);
        assert_eq!((t.reward, t.verdict), (0, Verdict::Rejected));
    }

    #[test]
    fn unparseable_counts_as_no_but_is_recorded() {
        let c = counts([1, 1, 1, 1]);
        let t = drive_episode("s", 0, &c, 0.0, Policy::Exhaustive, scripted(&["yes", "maybe"])).unwrap();
        assert_eq!(t.verdict, Verdict::Rejected);
        assert_eq!(t.steps[1].parsed_answer, Some(BinaryAnswer::Unparseable));
        assert_eq!(t.failures().count(), 1);
    }

    #[test]
    fn budget_stops_before_overrun() {
        let c = counts([2, 2, 2, 2]);
        let answers = ["yes"; 8];
        let t = drive_episode("s", 0, &c, 0.3, Policy::Budgeted { budget: 1.0 }, scripted(&answers)).unwrap();
        assert_eq!(t.verdict, Verdict::BudgetExhausted);
        assert_eq!(t.ask_count(), 3);
        assert_eq!(t.reward, 0);
        assert!(t.steps.iter().all(|s| s.action == Action::Ask));
        // zero cost never exhausts any budget
        let t = drive_episode("s", 0, &c, 0.0, Policy::Budgeted { budget: 1e-9 }, scripted(&answers)).unwrap();
        assert_eq!(t.verdict, Verdict::Accepted);
    }

    #[test]
    fn callback_error_keeps_partial_trace() {
        let c = counts([1, 1, 1, 1]);
        let mut n = 0;
        let res = drive_episode("s", 0, &c, 0.1, Policy::Exhaustive, |_, _| {
            n += 1;
            if n == 3 {
                Err("boom")
            } else {
                Ok(Asked {
                    question: "q".into(),
                    raw_answer: "yes".into(),
                })
            }
        });
        let (partial, err) = res.unwrap_err();
        assert_eq!(err, "boom");
        assert_eq!(partial.ask_count(), 2);
    }

    #[test]
    fn stage_index_never_decreases() {
        let c = counts([2, 1, 2, 1]);
        let answers = vec!["yes"; 6];
        let t = drive_episode("s", 0, &c, 0.1, Policy::Exhaustive, scripted(&answers)).unwrap();
        let stages: Vec<u8> = t.steps.iter().map(|s| s.state.stage).collect();
        assert!(stages.windows(2).all(|w| w[0] <= w[1]));
    }
}
