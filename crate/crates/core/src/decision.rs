//! Stage three: fold several planning transcripts into one answer.
//!
//! Strategies are registered by name in [`decision_strategies`]:
//!
//! * `single`: one greedy planning run.
//! * `vote`: `n_runs` temperature-sampled runs, most frequent answer wins,
//!   ties go to the lowest choice index.
//! * `arbitrate`: one run each from two planners; a judge model reads both
//!   anonymized transcripts and picks the answer. Agreeing plans skip the
//!   judge unless `force_judge` is set.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::{Backend, ChatMessage, ModelRequest, RequestScope, Stage};
use crate::dataset::PlanningSample;
use crate::error::{Error, Result};
use crate::memory::{render_memory, MemoryEntry};
use crate::planner::{parse_answer, PlanRun, Planner, PlanningTranscript};
use crate::registry::Registry;

pub const DEFAULT_VOTE_TEMPERATURE: f64 = 0.7;

fn default_n_runs() -> usize {
    5
}
fn default_vote_temperature() -> f64 {
    DEFAULT_VOTE_TEMPERATURE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionStrategy {
    /// Registered strategy name: `single`, `vote` or `arbitrate`.
    pub kind: String,
    /// Planner backend for `single`/`vote`; first planner for `arbitrate`.
    pub planner_a: String,
    #[serde(default)]
    pub planner_b: Option<String>,
    /// Judge backend; defaults to `planner_a`.
    #[serde(default)]
    pub judge: Option<String>,
    #[serde(default = "default_n_runs")]
    pub n_runs: usize,
    #[serde(default = "default_vote_temperature")]
    pub vote_temperature: f64,
    /// Call the judge even when both plans agree.
    #[serde(default)]
    pub force_judge: bool,
}

impl DecisionStrategy {
    pub fn single(planner: &str) -> Self {
        Self {
            kind: "single".into(),
            planner_a: planner.into(),
            planner_b: None,
            judge: None,
            n_runs: 1,
            vote_temperature: DEFAULT_VOTE_TEMPERATURE,
            force_judge: false,
        }
    }

    pub fn vote(planner: &str, n_runs: usize) -> Self {
        Self {
            kind: "vote".into(),
            n_runs,
            ..Self::single(planner)
        }
    }

    pub fn arbitrate(planner_a: &str, planner_b: &str, judge: Option<&str>) -> Self {
        Self {
            kind: "arbitrate".into(),
            planner_b: Some(planner_b.into()),
            judge: judge.map(String::from),
            ..Self::single(planner_a)
        }
    }

    pub fn judge_name(&self) -> &str {
        self.judge.as_deref().unwrap_or(&self.planner_a)
    }

    /// Backend names this strategy will call.
    pub fn backend_names(&self) -> Vec<&str> {
        let mut names = vec![self.planner_a.as_str()];
        if self.kind == "arbitrate" {
            names.extend(self.planner_b.as_deref());
            names.push(self.judge_name());
        }
        names.sort_unstable();
        names.dedup();
        names
    }

    pub fn validate(&self) -> Result<()> {
        decision_strategies().get(&self.kind)?.validate(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub sample_id: String,
    pub final_index: usize,
    pub strategy: DecisionStrategy,
    /// Request digests of the planning transcripts that fed the decision.
    pub inputs: Vec<String>,
    pub tie_broken: bool,
    pub judge_raw: Option<String>,
    pub judge_called: bool,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Degradations that did not stop the decision (failed runs, fallbacks).
    pub notes: Vec<String>,
}

/// Most frequent index; ties go to the lowest index and set the flag.
pub fn majority_vote(answers: &[usize]) -> Result<(usize, bool)> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &a in answers {
        *counts.entry(a).or_default() += 1;
    }
    let top = *counts.values().max().ok_or(Error::EmptyVote)?;
    let mut modes = counts.iter().filter(|(_, &c)| c == top).map(|(&i, _)| i);
    let winner = modes.next().expect("at least one mode");
    Ok((winner, modes.next().is_some()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeTemplate {
    pub version: String,
    pub system_text: String,
    pub max_tokens: u32,
}

impl Default for JudgeTemplate {
    fn default() -> Self {
        Self {
            version: "judge-v1".into(),
            system_text: "You review plans for the next step of an everyday task seen from a \
                          first-person camera. Two independent plans are given. Compare their \
                          reasoning against the task goal and the completed actions, then choose \
                          the most reasonable next action."
                .into(),
            max_tokens: 512,
        }
    }
}

fn plan_body(t: &PlanningTranscript) -> String {
    let mut body = t.raw_text.trim().to_string();
    if let (Some(_), Some(i)) = (&t.reask_text, t.answer.index) {
        body.push_str(&format!("\nFinal answer: ({})", PlanningSample::letter(i)));
    }
    body
}

/// Text-only judge request showing both plans as `Plan 1` / `Plan 2`.
pub fn build_arbitration_prompt(
    sample: &PlanningSample,
    memory: &[MemoryEntry],
    transcript_a: &PlanningTranscript,
    transcript_b: &PlanningTranscript,
    template: &JudgeTemplate,
    model_id: &str,
) -> ModelRequest {
    let choices = sample
        .choices
        .iter()
        .enumerate()
        .map(|(i, c)| format!("({}) {}", PlanningSample::letter(i), c))
        .collect::<Vec<_>>()
        .join("\n");
    let text = format!(
        "Task goal: {}\n\nActions completed so far:\n{}\n\nCandidate next actions:\n{}\n\n\
         Plan 1:\n{}\n\nPlan 2:\n{}\n\n\
         Decide which candidate action is the most reasonable next step. \
         Finish with a final line \"Answer: (X)\" where X is the letter of that action.",
        sample.task_goal,
        render_memory(memory),
        choices,
        plan_body(transcript_a),
        plan_body(transcript_b),
    );
    let mut request = ModelRequest::new(
        model_id,
        vec![
            ChatMessage::system(template.system_text.clone()),
            ChatMessage::user_text(text),
        ],
    );
    request.max_tokens = template.max_tokens;
    request.with_scope(RequestScope::new(Stage::Judge, &sample.sample_id))
}

/// Everything a strategy may draw on besides the sample itself.
#[derive(Clone, Copy)]
pub struct DecisionContext<'a> {
    pub planner: Planner<'a>,
    pub backends: &'a HashMap<String, Arc<dyn Backend>>,
    pub judge_template: &'a JudgeTemplate,
    pub seed: u64,
}

impl DecisionContext<'_> {
    fn backend(&self, name: &str) -> Result<&dyn Backend> {
        self.backends
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Config(format!("unknown backend `{name}`")))
    }
}

pub trait Decider: Send + Sync {
    fn validate(&self, strategy: &DecisionStrategy) -> Result<()>;

    fn decide(
        &self,
        sample: &PlanningSample,
        memory: &[MemoryEntry],
        strategy: &DecisionStrategy,
        ctx: &DecisionContext<'_>,
    ) -> Result<DecisionOutcome>;
}

fn outcome(sample: &PlanningSample, strategy: &DecisionStrategy, final_index: usize) -> DecisionOutcome {
    DecisionOutcome {
        sample_id: sample.sample_id.clone(),
        final_index,
        strategy: strategy.clone(),
        inputs: Vec::new(),
        tie_broken: false,
        judge_raw: None,
        judge_called: false,
        prompt_tokens: 0,
        completion_tokens: 0,
        notes: Vec::new(),
    }
}

fn absorb(out: &mut DecisionOutcome, t: &PlanningTranscript) {
    out.inputs.push(t.request_digest.clone());
    out.prompt_tokens += t.prompt_tokens;
    out.completion_tokens += t.completion_tokens;
}

pub struct SingleDecider;

impl Decider for SingleDecider {
    fn validate(&self, _strategy: &DecisionStrategy) -> Result<()> {
        Ok(())
    }

    fn decide(
        &self,
        sample: &PlanningSample,
        memory: &[MemoryEntry],
        strategy: &DecisionStrategy,
        ctx: &DecisionContext<'_>,
    ) -> Result<DecisionOutcome> {
        let backend = ctx.backend(&strategy.planner_a)?;
        let t = ctx
            .planner
            .plan(sample, memory, backend, &PlanRun::greedy("0"))?;
        let mut out = outcome(sample, strategy, t.answer.index.expect("parsed"));
        absorb(&mut out, &t);
        Ok(out)
    }
}

pub struct VoteDecider;

impl Decider for VoteDecider {
    fn validate(&self, strategy: &DecisionStrategy) -> Result<()> {
        if strategy.n_runs == 0 {
            return Err(Error::Config("vote needs n_runs >= 1".into()));
        }
        if strategy.vote_temperature.is_nan() || strategy.vote_temperature < 0.0 {
            return Err(Error::Config("vote_temperature must be >= 0".into()));
        }
        Ok(())
    }

    fn decide(
        &self,
        sample: &PlanningSample,
        memory: &[MemoryEntry],
        strategy: &DecisionStrategy,
        ctx: &DecisionContext<'_>,
    ) -> Result<DecisionOutcome> {
        let backend = ctx.backend(&strategy.planner_a)?;
        let mut out = outcome(sample, strategy, 0);
        let mut answers = Vec::with_capacity(strategy.n_runs);
        let mut hard_error = None;
        for i in 0..strategy.n_runs {
            let run = PlanRun {
                label: i.to_string(),
                temperature: strategy.vote_temperature,
                seed: Some(ctx.seed.wrapping_add(i as u64)),
            };
            match ctx.planner.plan(sample, memory, backend, &run) {
                Ok(t) => {
                    absorb(&mut out, &t);
                    answers.push(t.answer.index.expect("parsed"));
                }
                Err(e) => {
                    out.notes.push(format!("run {i} dropped: {e}"));
                    if !matches!(e.root(), Error::UnparseableAfterRetry(_)) && hard_error.is_none() {
                        hard_error = Some(e);
                    }
                }
            }
        }
        if answers.is_empty() {
            return Err(hard_error
                .unwrap_or_else(|| Error::AllRunsUnparseable(sample.sample_id.clone())));
        }
        let (winner, tie) = majority_vote(&answers)?;
        out.final_index = winner;
        out.tie_broken = tie;
        Ok(out)
    }
}

pub struct ArbitrateDecider;

impl Decider for ArbitrateDecider {
    fn validate(&self, strategy: &DecisionStrategy) -> Result<()> {
        match &strategy.planner_b {
            Some(b) if *b != strategy.planner_a => Ok(()),
            Some(_) => Err(Error::Config("arbitrate needs two distinct planners".into())),
            None => Err(Error::Config("arbitrate needs planner_b".into())),
        }
    }

    fn decide(
        &self,
        sample: &PlanningSample,
        memory: &[MemoryEntry],
        strategy: &DecisionStrategy,
        ctx: &DecisionContext<'_>,
    ) -> Result<DecisionOutcome> {
        self.validate(strategy)?;
        let planner_b = strategy.planner_b.as_deref().expect("validated");
        let ta = ctx.planner.plan(
            sample,
            memory,
            ctx.backend(&strategy.planner_a)?,
            &PlanRun::greedy("a"),
        );
        let tb = ctx
            .planner
            .plan(sample, memory, ctx.backend(planner_b)?, &PlanRun::greedy("b"));
        let mut out = outcome(sample, strategy, 0);
        let (ta, tb) = match (ta, tb) {
            (Ok(a), Ok(b)) => (a, b),
            (Ok(a), Err(e)) | (Err(e), Ok(a)) => {
                log::warn!("{}: one planner failed, using the other: {e}", sample.sample_id);
                out.notes.push(format!("planner failed, single plan used: {e}"));
                absorb(&mut out, &a);
                out.final_index = a.answer.index.expect("parsed");
                return Ok(out);
            }
            (Err(ea), Err(eb)) => {
                let both_unparseable = matches!(ea.root(), Error::UnparseableAfterRetry(_))
                    && matches!(eb.root(), Error::UnparseableAfterRetry(_));
                return Err(if both_unparseable {
                    Error::AllRunsUnparseable(sample.sample_id.clone())
                } else {
                    ea
                });
            }
        };
        absorb(&mut out, &ta);
        absorb(&mut out, &tb);
        let a_index = ta.answer.index.expect("parsed");
        if a_index == tb.answer.index.expect("parsed") && !strategy.force_judge {
            out.final_index = a_index;
            return Ok(out);
        }

        let judge = ctx.backend(strategy.judge_name())?;
        let request =
            build_arbitration_prompt(sample, memory, &ta, &tb, ctx.judge_template, judge.model_id());
        out.judge_called = true;
        match judge.complete(&request) {
            Ok(resp) => {
                out.prompt_tokens += resp.prompt_tokens;
                out.completion_tokens += resp.completion_tokens;
                let parsed = parse_answer(&resp.text, &sample.choices);
                out.judge_raw = Some(resp.text);
                match parsed.index {
                    Some(i) => out.final_index = i,
                    None => {
                        log::warn!("{}: judge reply unparseable, keeping plan 1", sample.sample_id);
                        out.notes.push("judge reply unparseable; plan 1 answer kept".into());
                        out.final_index = a_index;
                    }
                }
            }
            Err(e) => {
                log::warn!("{}: judge call failed, keeping plan 1: {e}", sample.sample_id);
                out.notes.push(format!("judge call failed; plan 1 answer kept: {e}"));
                out.final_index = a_index;
            }
        }
        Ok(out)
    }
}

/// The built-in decision strategies.
pub fn decision_strategies() -> Registry<dyn Decider> {
    let mut reg: Registry<dyn Decider> = Registry::new("decision strategy");
    reg.register("single", Arc::new(SingleDecider))
        .register("vote", Arc::new(VoteDecider))
        .register("arbitrate", Arc::new(ArbitrateDecider));
    reg
}

pub fn decide(
    sample: &PlanningSample,
    memory: &[MemoryEntry],
    strategy: &DecisionStrategy,
    ctx: &DecisionContext<'_>,
) -> Result<DecisionOutcome> {
    decision_strategies()
        .get(&strategy.kind)?
        .decide(sample, memory, strategy, ctx)
}
