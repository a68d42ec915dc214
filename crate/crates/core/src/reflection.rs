//! Plan reflection: self, cross-agent and human review, plus the
//! refine-until-approved loop.
//!
//! Model reviewers answer in key-value form:
//!
//! ```text
//! verdict: revise
//! critiques: s2=too vague; s3=missing a check
//! suggest: boil water [kitchen]; steep for 3 minutes
//! ```
//!
//! `critiques` and `suggest` are optional, but a `revise` verdict without
//! critiques is rejected.

use std::collections::BTreeSet;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, ModelRequest, Purpose};
use crate::planning::{parse_plan_text, parse_step_line, Plan, PlanStatus, StepSpec};
use crate::prompt::{optimise_response, OutputSpec, StructuredResponse};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReflectionError {
    #[error("unparseable feedback: {0}")]
    UnparseableFeedback(String),
    #[error("invalid feedback: {0}")]
    InvalidFeedback(String),
    #[error("reviewer {reviewer_id} unavailable ({} other feedback collected)", feedback.len())]
    ReviewerUnavailable {
        reviewer_id: String,
        feedback: Vec<ReflectionFeedback>,
    },
    #[error("no reviewers given")]
    NoReviewers,
    #[error("human feedback timed out")]
    HumanTimeout,
    #[error("waiting for human feedback")]
    AwaitingHuman,
    #[error("max_iterations must be at least 1")]
    InvalidMaxIterations,
    #[error("plan {0} is not a draft")]
    NotDraft(String),
    #[error("revised plan did not parse")]
    UnparseableRevision,
    #[error("no approval after {} iterations", history.iterations.len())]
    MaxIterationsExceeded {
        plan: Box<Plan>,
        history: RefinementHistory,
    },
    #[error("refinement interrupted: {cause}")]
    Interrupted {
        cause: Box<ReflectionError>,
        plan: Box<Plan>,
        history: RefinementHistory,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackSource {
    #[serde(rename = "self")]
    SelfReview,
    Agent { reviewer_id: String },
    Human { channel_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    Revise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Critique {
    pub step_id: String,
    pub comment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionFeedback {
    pub source: FeedbackSource,
    pub verdict: Verdict,
    #[serde(default)]
    pub critiques: Vec<Critique>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggested_steps: Option<Vec<StepSpec>>,
}

impl ReflectionFeedback {
    pub fn approve(source: FeedbackSource) -> Self {
        Self {
            source,
            verdict: Verdict::Approve,
            critiques: Vec::new(),
            suggested_steps: None,
        }
    }

    pub fn revise(source: FeedbackSource, critiques: Vec<Critique>) -> Self {
        Self {
            source,
            verdict: Verdict::Revise,
            critiques,
            suggested_steps: None,
        }
    }

    pub fn validate(&self) -> Result<(), ReflectionError> {
        if self.verdict == Verdict::Revise && self.critiques.is_empty() {
            return Err(ReflectionError::InvalidFeedback("revise without critiques".into()));
        }
        if matches!(&self.suggested_steps, Some(s) if s.is_empty()) {
            return Err(ReflectionError::InvalidFeedback("empty suggested step list".into()));
        }
        Ok(())
    }
}

/// Parses a model reviewer's key-value answer.
pub fn parse_feedback(raw: &str, source: FeedbackSource) -> Result<ReflectionFeedback, ReflectionError> {
    let spec = OutputSpec::key_value("reflection", ["verdict"]);
    let map = match optimise_response(raw, &spec) {
        Ok(StructuredResponse::KeyValue(map)) => map,
        Ok(_) => unreachable!("key_value spec yields a map"),
        Err(e) => return Err(ReflectionError::UnparseableFeedback(e.to_string())),
    };
    let verdict = match map["verdict"].to_lowercase().as_str() {
        "approve" => Verdict::Approve,
        "revise" => Verdict::Revise,
        other => return Err(ReflectionError::UnparseableFeedback(format!("verdict {other:?}"))),
    };
    let mut critiques = Vec::new();
    for part in map.get("critiques").map(String::as_str).unwrap_or("").split(';') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (step_id, comment) = part
            .split_once('=')
            .ok_or_else(|| ReflectionError::UnparseableFeedback(format!("critique {part:?}")))?;
        critiques.push(Critique {
            step_id: step_id.trim().to_string(),
            comment: comment.trim().to_string(),
        });
    }
    let suggested_steps = match map.get("suggest") {
        Some(s) => Some(
            s.split(';')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| parse_step_line(p).ok_or_else(|| ReflectionError::UnparseableFeedback(format!("step {p:?}"))))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    let feedback = ReflectionFeedback {
        source,
        verdict,
        critiques,
        suggested_steps,
    };
    feedback
        .validate()
        .map_err(|e| ReflectionError::UnparseableFeedback(e.to_string()))?;
    Ok(feedback)
}

pub fn reflection_prompt(plan: &Plan) -> String {
    format!("REFLECT on plan for goal {}:\n{}", plan.goal_id, plan.render())
}

fn query_reviewer(
    plan: &Plan,
    gateway: &Gateway,
    actor_id: &str,
    seed: u64,
    source: FeedbackSource,
) -> Result<ReflectionFeedback, ReflectionError> {
    let request = ModelRequest::new(reflection_prompt(plan), actor_id)
        .with_seed(seed)
        .with_purpose(Purpose::Reflect);
    let response = gateway.one_shot_query(&request)?;
    parse_feedback(&response.text, source)
}

/// Reviews `plan` with the agent's own backend.
pub fn self_reflect(plan: &Plan, gateway: &Gateway, actor_id: &str, seed: u64) -> Result<ReflectionFeedback, ReflectionError> {
    if plan.status != PlanStatus::Draft {
        return Err(ReflectionError::NotDraft(plan.plan_id.clone()));
    }
    query_reviewer(plan, gateway, actor_id, seed, FeedbackSource::SelfReview)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationPolicy {
    #[default]
    Unanimity,
    Majority,
}

impl AggregationPolicy {
    /// Majority needs strictly more approvals than half; a tie revises.
    pub fn aggregate(self, verdicts: &[Verdict]) -> Verdict {
        let approvals = verdicts.iter().filter(|v| **v == Verdict::Approve).count();
        let approved = match self {
            AggregationPolicy::Unanimity => !verdicts.is_empty() && approvals == verdicts.len(),
            AggregationPolicy::Majority => approvals * 2 > verdicts.len(),
        };
        if approved {
            Verdict::Approve
        } else {
            Verdict::Revise
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reviewer {
    pub reviewer_id: String,
    pub gateway: Gateway,
}

impl Reviewer {
    pub fn new(reviewer_id: impl Into<String>, gateway: Gateway) -> Self {
        Self {
            reviewer_id: reviewer_id.into(),
            gateway,
        }
    }
}

/// Queries every reviewer once, in roster order. Feedback comes back in roster
/// order. A failing reviewer yields `ReviewerUnavailable` carrying the
/// feedback of the others.
pub fn cross_reflect(
    plan: &Plan,
    reviewers: &[Reviewer],
    policy: AggregationPolicy,
    seed: u64,
) -> Result<(Verdict, Vec<ReflectionFeedback>), ReflectionError> {
    if reviewers.is_empty() {
        return Err(ReflectionError::NoReviewers);
    }
    let results: Vec<Result<ReflectionFeedback, ReflectionError>> = reviewers
        .iter()
        .map(|r| {
            let source = FeedbackSource::Agent {
                reviewer_id: r.reviewer_id.clone(),
            };
            query_reviewer(plan, &r.gateway, &r.reviewer_id, seed, source)
        })
        .collect();

    let mut feedback = Vec::new();
    let mut unavailable = None;
    for (reviewer, result) in reviewers.iter().zip(results) {
        match result {
            Ok(f) => feedback.push(f),
            Err(_) if unavailable.is_none() => unavailable = Some(reviewer.reviewer_id.clone()),
            Err(_) => {}
        }
    }
    if let Some(reviewer_id) = unavailable {
        return Err(ReflectionError::ReviewerUnavailable { reviewer_id, feedback });
    }
    let verdicts: Vec<_> = feedback.iter().map(|f| f.verdict).collect();
    Ok((policy.aggregate(&verdicts), feedback))
}

/// Merges several reviewers' feedback into one under `policy`.
pub fn combine_feedback(policy: AggregationPolicy, feedback: &[ReflectionFeedback]) -> ReflectionFeedback {
    let verdicts: Vec<_> = feedback.iter().map(|f| f.verdict).collect();
    let verdict = policy.aggregate(&verdicts);
    let mut critiques: Vec<Critique> = feedback
        .iter()
        .filter(|f| f.verdict == Verdict::Revise)
        .flat_map(|f| f.critiques.iter().cloned())
        .collect();
    if verdict == Verdict::Revise && critiques.is_empty() {
        critiques.push(Critique {
            step_id: String::new(),
            comment: "reviewers did not reach approval".into(),
        });
    }
    ReflectionFeedback {
        source: FeedbackSource::Agent {
            reviewer_id: "panel".into(),
        },
        verdict,
        critiques: if verdict == Verdict::Approve { Vec::new() } else { critiques },
        suggested_steps: if verdict == Verdict::Approve {
            None
        } else {
            feedback.iter().find_map(|f| f.suggested_steps.clone())
        },
    }
}

/// Feedback as posted by a human through the API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanFeedback {
    pub verdict: Verdict,
    #[serde(default)]
    pub critiques: Vec<Critique>,
    #[serde(default)]
    pub suggested_steps: Option<Vec<StepSpec>>,
}

/// A mailbox between a suspended run and a human reviewer. Time is counted
/// in logical ticks: every unanswered poll is one tick.
#[derive(Debug)]
pub struct HumanChannel {
    pub channel_id: String,
    pub timeout_ticks: Option<u64>,
    state: Mutex<(Option<HumanFeedback>, u64)>,
}

impl HumanChannel {
    pub fn new(channel_id: impl Into<String>, timeout_ticks: Option<u64>) -> Self {
        Self {
            channel_id: channel_id.into(),
            timeout_ticks,
            state: Mutex::new((None, 0)),
        }
    }

    pub fn post(&self, feedback: HumanFeedback) -> Result<(), ReflectionError> {
        let converted = self.convert(feedback.clone());
        converted.validate()?;
        self.state.lock().expect("channel poisoned").0 = Some(feedback);
        Ok(())
    }

    pub fn ticks(&self) -> u64 {
        self.state.lock().expect("channel poisoned").1
    }

    fn convert(&self, f: HumanFeedback) -> ReflectionFeedback {
        ReflectionFeedback {
            source: FeedbackSource::Human {
                channel_id: self.channel_id.clone(),
            },
            verdict: f.verdict,
            critiques: f.critiques,
            suggested_steps: f.suggested_steps,
        }
    }

    /// Takes posted feedback if any. Otherwise counts a tick and reports
    /// either a timeout or that the run must wait.
    pub fn poll(&self) -> Result<ReflectionFeedback, ReflectionError> {
        let mut state = self.state.lock().expect("channel poisoned");
        if let Some(f) = state.0.take() {
            state.1 = 0;
            return Ok(self.convert(f));
        }
        if let Some(limit) = self.timeout_ticks {
            if state.1 >= limit {
                return Err(ReflectionError::HumanTimeout);
            }
        }
        state.1 += 1;
        Err(ReflectionError::AwaitingHuman)
    }
}

/// Asks the human channel for a verdict on `plan`.
pub fn human_reflect(plan: &Plan, channel: &HumanChannel) -> Result<ReflectionFeedback, ReflectionError> {
    if plan.status != PlanStatus::Draft {
        return Err(ReflectionError::NotDraft(plan.plan_id.clone()));
    }
    channel.poll()
}

/// Anything that can pass a verdict on a draft plan.
pub trait Reflect {
    fn reflect(&self, plan: &Plan, iteration: usize) -> Result<ReflectionFeedback, ReflectionError>;
}

pub struct SelfReflector {
    pub gateway: Gateway,
    pub actor_id: String,
}

impl Reflect for SelfReflector {
    fn reflect(&self, plan: &Plan, iteration: usize) -> Result<ReflectionFeedback, ReflectionError> {
        self_reflect(plan, &self.gateway, &self.actor_id, iteration as u64)
    }
}

pub struct CrossReflector {
    pub reviewers: Vec<Reviewer>,
    pub policy: AggregationPolicy,
}

impl Reflect for CrossReflector {
    fn reflect(&self, plan: &Plan, iteration: usize) -> Result<ReflectionFeedback, ReflectionError> {
        let (_, feedback) = cross_reflect(plan, &self.reviewers, self.policy, iteration as u64)?;
        Ok(combine_feedback(self.policy, &feedback))
    }
}

impl Reflect for HumanChannel {
    fn reflect(&self, plan: &Plan, _iteration: usize) -> Result<ReflectionFeedback, ReflectionError> {
        human_reflect(plan, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    Approved,
    MaxIterations,
    HumanTimeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub plan_digest: String,
    pub feedback: ReflectionFeedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RefinementHistory {
    pub iterations: Vec<Iteration>,
    /// `None` while refinement is still in progress.
    pub terminated_by: Option<TerminatedBy>,
}

/// Replaces the critiqued steps with `suggested` and re-chains the plan.
/// The suggestions go where the first critiqued step was; when no critique
/// names a known step they are appended.
pub fn apply_suggestions(plan: &Plan, critiques: &[Critique], suggested: &[StepSpec]) -> Plan {
    let critiqued: BTreeSet<&str> = critiques.iter().map(|c| c.step_id.as_str()).collect();
    let mut specs = Vec::new();
    let mut inserted = false;
    for step in &plan.steps {
        if critiqued.contains(step.step_id.as_str()) {
            if !inserted {
                specs.extend(suggested.iter().cloned());
                inserted = true;
            }
        } else {
            specs.push(StepSpec {
                description: step.description.clone(),
                capability: step.required_capability.clone(),
            });
        }
    }
    if !inserted {
        specs.extend(suggested.iter().cloned());
    }
    Plan::linear(plan.plan_id.clone(), plan.goal_id.clone(), &specs)
}

pub fn revision_prompt(plan: &Plan, feedback: &ReflectionFeedback) -> String {
    let critiques = feedback
        .critiques
        .iter()
        .map(|c| format!("{}: {}", c.step_id, c.comment))
        .collect::<Vec<_>>()
        .join("\n");
    format!("REVISE plan for goal {}:\n{}\nCRITIQUES:\n{}", plan.goal_id, plan.render(), critiques)
}

/// Produces the next draft: suggestions when present, otherwise a fresh
/// plan requested from `gateway`.
pub fn revise_plan(
    plan: &Plan,
    feedback: &ReflectionFeedback,
    gateway: &Gateway,
    actor_id: &str,
    seed: u64,
) -> Result<Plan, ReflectionError> {
    if let Some(suggested) = &feedback.suggested_steps {
        return Ok(apply_suggestions(plan, &feedback.critiques, suggested));
    }
    let request = ModelRequest::new(revision_prompt(plan, feedback), actor_id)
        .with_seed(seed)
        .with_purpose(Purpose::Plan);
    let response = gateway.one_shot_query(&request)?;
    let specs = parse_plan_text(&response.text).map_err(|_| ReflectionError::UnparseableRevision)?;
    Ok(Plan::linear(plan.plan_id.clone(), plan.goal_id.clone(), &specs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineStep {
    Approved,
    Revised,
    Exhausted,
}

/// Resumable refinement state: feed it one feedback at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub plan: Plan,
    pub history: RefinementHistory,
    pub max_iterations: usize,
}

impl Refinement {
    pub fn new(plan: Plan, max_iterations: usize) -> Result<Self, ReflectionError> {
        if max_iterations == 0 {
            return Err(ReflectionError::InvalidMaxIterations);
        }
        Ok(Self {
            plan,
            history: RefinementHistory::default(),
            max_iterations,
        })
    }

    pub fn iterations(&self) -> usize {
        self.history.iterations.len()
    }

    pub fn is_finished(&self) -> bool {
        self.history.terminated_by.is_some()
    }

    /// Records `feedback` against the current plan and advances.
    pub fn apply<F>(&mut self, feedback: ReflectionFeedback, revise: F) -> Result<RefineStep, ReflectionError>
    where
        F: FnOnce(&Plan, &ReflectionFeedback) -> Result<Plan, ReflectionError>,
    {
        feedback.validate()?;
        self.history.iterations.push(Iteration {
            plan_digest: self.plan.digest(),
            feedback: feedback.clone(),
        });
        if feedback.verdict == Verdict::Approve {
            self.plan.status = PlanStatus::Approved;
            self.history.terminated_by = Some(TerminatedBy::Approved);
            return Ok(RefineStep::Approved);
        }
        if self.iterations() >= self.max_iterations {
            self.history.terminated_by = Some(TerminatedBy::MaxIterations);
            return Ok(RefineStep::Exhausted);
        }
        self.plan = revise(&self.plan, &feedback)?;
        Ok(RefineStep::Revised)
    }

    pub fn time_out(&mut self) {
        self.history.terminated_by = Some(TerminatedBy::HumanTimeout);
    }
}

/// Reflect, revise and repeat until approval or `max_iterations`
/// reflections. Revisions without suggestions are regenerated via
/// `gateway`.
pub fn refine_until_approved(
    plan: Plan,
    reflector: &dyn Reflect,
    gateway: &Gateway,
    actor_id: &str,
    max_iterations: usize,
) -> Result<(Plan, RefinementHistory), ReflectionError> {
    let mut state = Refinement::new(plan, max_iterations)?;
    loop {
        let iteration = state.iterations();
        let feedback = match reflector.reflect(&state.plan, iteration) {
            Ok(f) => f,
            Err(cause) => {
                if cause == ReflectionError::HumanTimeout {
                    state.time_out();
                }
                return Err(ReflectionError::Interrupted {
                    cause: Box::new(cause),
                    plan: Box::new(state.plan),
                    history: state.history,
                });
            }
        };
        let step = state.apply(feedback, |p, f| revise_plan(p, f, gateway, actor_id, iteration as u64))?;
        match step {
            RefineStep::Approved => return Ok((state.plan, state.history)),
            RefineStep::Revised => continue,
            RefineStep::Exhausted => {
                return Err(ReflectionError::MaxIterationsExceeded {
                    plan: Box::new(state.plan),
                    history: state.history,
                })
            }
        }
    }
}
