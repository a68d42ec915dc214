//! Assembled runtime and the run state machine.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{BranchPolicy, CooperationKind, GoalCreatorKind, PatternConfig, PlannerKind, QueryingKind, ReflectorKind};
use super::OrchestratorError;
use crate::audit::{kinds, EventLog, EventRecord};
use crate::cooperation::{execute_with_roles, run_debate, run_vote, AgentHandle, RosterEntry};
use crate::gateway::{
    count_tokens, parse_rules, CallRecord, FinishReason, Gateway, GatewayError, ModelBackend, ModelRequest, ModelResponse,
    ModelSession, Purpose, ScriptedBackend, ScriptedRule, UsageMeter,
};
use crate::goal::{load_detector_events, DetectorEvent, Goal, GoalCreator};
use crate::guardrails::{GuardModality, GuardPipeline, GuardVerdict, GuardedBackend, GUARD_ACTOR};
use crate::memory::{rerank_filter, KnowledgeBase};
use crate::planning::{
    generate_multi_path, generate_single_path, generate_single_path_incremental, validate_plan, Plan, PlanStatus,
    PlanTree, Step, StepOption, StepStatus,
};
use crate::prompt::{optimise_response, OutputSpec, PromptTemplate, RequestMeta, TemplateRegistry};
use crate::reflection::{
    combine_feedback, cross_reflect, revise_plan, self_reflect, AggregationPolicy, FeedbackSource, HumanFeedback,
    RefineStep, Refinement, ReflectionFeedback, Reviewer, Verdict,
};
use crate::tooling::{
    adapt_invoke, derive_args, learn_interface, select_operation, DiscoverConstraints, LocalTool, Objective, Registry,
    RegistryEntry, ToolBox, ToolDescriptor, ToolStatus,
};

pub const DEFAULT_RULES: &str = include_str!("../../resources/default_rules.txt");
pub const DEFAULT_GUARDRAILS: &str = include_str!("../../resources/default_guardrails.json");
pub const DEFAULT_REGISTRY: &str = include_str!("../../resources/default_registry.json");
pub const DEFAULT_ROSTER: &str = include_str!("../../resources/default_roster.json");
pub const DEFAULT_CORPUS: &str = include_str!("../../resources/default_corpus.jsonl");
pub const DEFAULT_PLAN_TEMPLATE: &str = include_str!("../../resources/templates/plan.txt");

/// The bundled rules and guardrails compile once per process.
fn default_rules() -> &'static [ScriptedRule] {
    static RULES: OnceLock<Vec<ScriptedRule>> = OnceLock::new();
    RULES.get_or_init(|| parse_rules(DEFAULT_RULES).expect("bundled rules parse"))
}

fn default_guardrails() -> &'static GuardPipeline {
    static PIPELINE: OnceLock<GuardPipeline> = OnceLock::new();
    PIPELINE.get_or_init(|| GuardPipeline::from_json(DEFAULT_GUARDRAILS).expect("bundled guardrails parse"))
}

pub const ROLE_REVIEWER: &str = "reviewer";
pub const ROLE_VOTER: &str = "voter";
pub const ROLE_DEBATER: &str = "debater";

const ORCHESTRATOR: &str = "orchestrator";
const PLANNER: &str = "planner";
const REFLECTOR: &str = "reflector";
const EXECUTOR: &str = "executor";

// ============================================================================
// Instrumentation
// ============================================================================

/// Appends one `model_call` event per successful backend call.
pub struct InstrumentedBackend {
    inner: Arc<dyn ModelBackend>,
    log: Arc<EventLog>,
}

impl InstrumentedBackend {
    pub fn new(inner: Arc<dyn ModelBackend>, log: Arc<EventLog>) -> Self {
        Self { inner, log }
    }
}

impl ModelBackend for InstrumentedBackend {
    fn generate(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let response = self.inner.generate(request)?;
        self.log.append(
            &request.actor_id,
            kinds::MODEL_CALL,
            &json!({
                "purpose": request.purpose,
                "seed": request.seed,
                "prompt_tokens": response.usage.prompt_tokens,
                "completion_tokens": response.usage.completion_tokens,
                "finish_reason": response.finish_reason,
                "cost_units": response.cost_units,
            }),
        );
        Ok(response)
    }

    fn window_tokens(&self) -> usize {
        self.inner.window_tokens()
    }

    fn unit_price(&self) -> f64 {
        self.inner.unit_price()
    }

    fn call_log(&self) -> Vec<CallRecord> {
        self.inner.call_log()
    }

    fn call_count(&self) -> usize {
        self.inner.call_count()
    }
}

// ============================================================================
// Assembly
// ============================================================================

/// A roster member with its own rules already parsed.
#[derive(Debug, Clone)]
struct RosterMember {
    entry: RosterEntry,
    rules: Option<Vec<ScriptedRule>>,
}

/// Everything a run needs, loaded once from a config.
pub struct AgentRuntime {
    config: PatternConfig,
    rules: Vec<ScriptedRule>,
    templates: TemplateRegistry,
    guard: Option<Arc<GuardPipeline>>,
    registry: Arc<Registry>,
    descriptors: BTreeMap<String, ToolDescriptor>,
    toolbox: ToolBox,
    corpus: Arc<RwLock<KnowledgeBase>>,
    detectors: Vec<DetectorEvent>,
    roster: Vec<RosterMember>,
}

impl std::fmt::Debug for AgentRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentRuntime")
            .field("patterns", &self.active_patterns())
            .finish()
    }
}

fn resolve(base_dir: &Path, path: &str) -> PathBuf {
    base_dir.join(path)
}

fn read_resource(path: &Path) -> Result<String, OrchestratorError> {
    std::fs::read_to_string(path).map_err(|_| OrchestratorError::MissingResource(path.display().to_string()))
}

fn invalid(what: impl std::fmt::Display) -> OrchestratorError {
    OrchestratorError::InvalidConfig(what.to_string())
}

/// Loads every resource `config` references, resolving relative paths
/// against `base_dir`, and checks the roster-dependent invariants.
pub fn assemble(config: PatternConfig, base_dir: &Path) -> Result<AgentRuntime, OrchestratorError> {
    config.validate()?;

    let rules = match &config.model.rules_path {
        Some(p) => {
            let rules = parse_rules(&read_resource(&resolve(base_dir, p))?)
                .map_err(|e| invalid(format!("model rules: {e}")))?;
            // Duplicate ids and the like surface here rather than per run.
            ScriptedBackend::new(rules.clone()).map_err(|e| invalid(format!("model rules: {e}")))?;
            rules
        }
        None => default_rules().to_vec(),
    };

    let templates = TemplateRegistry::new();
    let plan_template = PromptTemplate::parse_file(DEFAULT_PLAN_TEMPLATE).expect("bundled plan template parses");
    if let Some(dir) = &config.prompts.dir {
        let dir = resolve(base_dir, dir);
        if !dir.is_dir() {
            return Err(OrchestratorError::MissingResource(dir.display().to_string()));
        }
        templates.load_dir(&dir).map_err(invalid)?;
    }
    if templates.get(&plan_template.template_id).is_none() {
        templates.register_template(plan_template).map_err(invalid)?;
    }
    if templates.get(&config.prompts.plan_template).is_none() {
        return Err(invalid(format!("unknown plan template {:?}", config.prompts.plan_template)));
    }

    let guard = if config.guardrails_enabled {
        let pipeline = match &config.guardrails.path {
            Some(p) => GuardPipeline::from_json(&read_resource(&resolve(base_dir, p))?)
                .map_err(|e| invalid(format!("guardrails: {e}")))?,
            None => default_guardrails().clone(),
        };
        Some(Arc::new(pipeline))
    } else {
        None
    };

    let corpus = match &config.memory.corpus_path {
        Some(p) => KnowledgeBase::from_jsonl(&read_resource(&resolve(base_dir, p))?),
        None => KnowledgeBase::from_jsonl(DEFAULT_CORPUS),
    }
    .map_err(|e| invalid(format!("corpus: {e}")))?;
    let corpus = Arc::new(RwLock::new(corpus));

    let detectors = match &config.detectors.path {
        Some(p) => {
            let path = resolve(base_dir, p);
            if !path.is_file() {
                return Err(OrchestratorError::MissingResource(path.display().to_string()));
            }
            load_detector_events(&path).map_err(|e| invalid(format!("detectors: {e}")))?
        }
        None => Vec::new(),
    };

    let toolbox = ToolBox::bundled(Arc::clone(&corpus));
    let mut descriptors = BTreeMap::new();
    for id in toolbox.ids() {
        let tool: &Arc<dyn LocalTool> = toolbox.get(&id).expect("listed tool exists");
        let d = learn_interface(&tool.manual()).map_err(invalid)?;
        descriptors.insert(d.tool_id.clone(), d);
    }
    if let Some(dir) = &config.registry.manuals_dir {
        let dir = resolve(base_dir, dir);
        let listing = std::fs::read_dir(&dir).map_err(|_| OrchestratorError::MissingResource(dir.display().to_string()))?;
        let mut paths: Vec<PathBuf> = listing
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "manual"))
            .collect();
        paths.sort();
        for p in paths {
            let d = learn_interface(&read_resource(&p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            descriptors.insert(d.tool_id.clone(), d);
        }
    }
    let registry = match &config.registry.path {
        Some(p) => {
            let entries: Vec<RegistryEntry> = serde_json::from_str(&read_resource(&resolve(base_dir, p))?)
                .map_err(|e| invalid(format!("registry: {e}")))?;
            Registry::from_entries(entries)
        }
        None => Registry::from_entries(serde_json::from_str(DEFAULT_REGISTRY).expect("bundled registry parses")),
    }
    .map_err(|e| invalid(format!("registry: {e}")))?;
    if config.adapter_enabled {
        for e in registry.entries() {
            if let Some(d) = &e.descriptor_ref {
                if !descriptors.contains_key(d) {
                    return Err(invalid(format!("registry entry {} names unknown descriptor {d}", e.entry_id)));
                }
            }
        }
    }

    let (roster_src, roster_dir) = match &config.roster.path {
        Some(p) => {
            let path = resolve(base_dir, p);
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| base_dir.to_path_buf());
            (read_resource(&path)?, dir)
        }
        None => (DEFAULT_ROSTER.to_string(), base_dir.to_path_buf()),
    };
    let entries: Vec<RosterEntry> = serde_json::from_str(&roster_src).map_err(|e| invalid(format!("roster: {e}")))?;
    let mut roster = Vec::with_capacity(entries.len());
    let mut seen = BTreeSet::new();
    for entry in entries {
        if !seen.insert(entry.agent_id.clone()) {
            return Err(invalid(format!("roster: duplicate agent {}", entry.agent_id)));
        }
        if !(entry.weight > 0.0 && entry.weight.is_finite()) {
            return Err(invalid(format!("roster: {} weight must be positive", entry.agent_id)));
        }
        let rules = match &entry.rules_path {
            Some(p) => {
                let src = read_resource(&roster_dir.join(p))?;
                let r = parse_rules(&src).map_err(|e| invalid(format!("{p}: {e}")))?;
                ScriptedBackend::new(r.clone()).map_err(|e| invalid(format!("{p}: {e}")))?;
                Some(r)
            }
            None => None,
        };
        roster.push(RosterMember { entry, rules });
    }
    let count = |role: &str| roster.iter().filter(|m| m.entry.roles.contains(role)).count();
    if config.reflectors.contains(&ReflectorKind::Cross) && count(ROLE_REVIEWER) == 0 {
        return Err(invalid("cross reflection needs at least one reviewer in the roster"));
    }
    if config.cooperation.contains(&CooperationKind::Voting) && count(ROLE_VOTER) == 0 {
        return Err(invalid("voting needs at least one voter in the roster"));
    }
    if config.cooperation.contains(&CooperationKind::Debate) && count(ROLE_DEBATER) < 2 {
        return Err(invalid("debate needs at least two debaters in the roster"));
    }
    if config.cooperation.contains(&CooperationKind::RoleBased) && count(crate::cooperation::ROLE_ASSIGNER) != 1 {
        return Err(invalid("role_based cooperation needs exactly one assigner in the roster"));
    }

    Ok(AgentRuntime {
        config,
        rules,
        templates,
        guard,
        registry: Arc::new(registry),
        descriptors,
        toolbox,
        corpus,
        detectors,
        roster,
    })
}

// ============================================================================
// Run state
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
    AwaitingHuman,
    Aborted,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Complete | RunStatus::Failed | RunStatus::Aborted)
    }
}

/// The next stage a run executes when advanced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Goal,
    Optimise,
    Retrieve,
    Plan,
    Choose,
    Reflect,
    Execute,
    Respond,
    Done,
}

/// What a suspended run waits for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PendingAction {
    Feedback { plan: Plan, plan_digest: String, iteration: usize },
    Choice { node_id: String, options: Vec<StepOption> },
}

/// Everything needed to resume a run. Persisted as the run's state file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub seed: u64,
    pub goal_text: String,
    pub status: RunStatus,
    pub stage: Stage,
    pub goal: Option<Goal>,
    pub prompt: Option<String>,
    pub tree: Option<PlanTree>,
    pub plan: Option<Plan>,
    pub refinement: Option<Refinement>,
    pub pending: Option<PendingAction>,
    pub posted_feedback: Option<HumanFeedback>,
    /// Unanswered polls of the human channel for the current iteration.
    pub human_ticks: u64,
    /// Iteration whose automated reviewers already approved and which now
    /// waits only for the human.
    pub auto_approved_iteration: Option<usize>,
    pub step_results: BTreeMap<String, String>,
    pub final_answer: Option<String>,
    pub error: Option<String>,
    pub usage: UsageMeter,
    pub first_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub goal: Option<Goal>,
    pub final_plan: Option<Plan>,
    pub step_results: BTreeMap<String, String>,
    pub status: RunStatus,
    pub usage: UsageMeter,
    pub event_range: (u64, u64),
    pub final_answer: Option<String>,
    pub error: Option<String>,
    pub pending: Option<PendingAction>,
    pub tree: Option<PlanTree>,
}

/// A live run: its state, its event log, and the backends it talks to.
pub struct RunHandle {
    pub state: RunState,
    pub log: Arc<EventLog>,
    gateway: Gateway,
    agents: Vec<AgentHandle>,
    scripted: Vec<Arc<ScriptedBackend>>,
}

impl std::fmt::Debug for RunHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunHandle")
            .field("run_id", &self.state.run_id)
            .field("status", &self.state.status)
            .field("events", &self.log.len())
            .finish()
    }
}

impl RunHandle {
    /// Backend calls made by this handle across every model and agent.
    pub fn model_calls(&self) -> usize {
        self.scripted.iter().map(|b| b.call_count()).sum()
    }

    pub fn call_log(&self) -> Vec<CallRecord> {
        self.scripted.iter().flat_map(|b| b.call_log()).collect()
    }

    pub fn records(&self) -> Vec<EventRecord> {
        self.log.records()
    }

    /// The plan currently under review, else the accepted plan.
    pub fn current_plan(&self) -> Option<&Plan> {
        match (&self.state.refinement, self.state.stage) {
            (Some(r), Stage::Reflect) => Some(&r.plan),
            _ => self.state.plan.as_ref(),
        }
    }

    pub fn result(&self) -> RunResult {
        RunResult {
            run_id: self.state.run_id.clone(),
            goal: self.state.goal.clone(),
            final_plan: self.current_plan().cloned(),
            step_results: self.state.step_results.clone(),
            status: self.state.status,
            usage: self.state.usage.clone(),
            event_range: (self.state.first_seq, self.log.last_seq()),
            final_answer: self.state.final_answer.clone(),
            error: self.state.error.clone(),
            pending: self.state.pending.clone(),
            tree: self.state.tree.clone(),
        }
    }
}

fn status_of(verdict: GuardVerdict) -> &'static str {
    match verdict {
        GuardVerdict::Pass => "pass",
        GuardVerdict::Transform => "transform",
        GuardVerdict::Block => "block",
    }
}

fn human_feedback(channel_id: &str, f: HumanFeedback) -> ReflectionFeedback {
    ReflectionFeedback {
        source: FeedbackSource::Human {
            channel_id: channel_id.to_string(),
        },
        verdict: f.verdict,
        critiques: f.critiques,
        suggested_steps: f.suggested_steps,
    }
}

type StageResult = Result<(), String>;

impl AgentRuntime {
    pub fn config(&self) -> &PatternConfig {
        &self.config
    }

    pub fn active_patterns(&self) -> BTreeSet<String> {
        self.config.active_patterns()
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn descriptors(&self) -> &BTreeMap<String, ToolDescriptor> {
        &self.descriptors
    }

    pub fn corpus(&self) -> Arc<RwLock<KnowledgeBase>> {
        Arc::clone(&self.corpus)
    }

    pub fn guard(&self) -> Option<&Arc<GuardPipeline>> {
        self.guard.as_ref()
    }

    fn wrap(&self, scripted: Arc<ScriptedBackend>, log: &Arc<EventLog>) -> Arc<dyn ModelBackend> {
        let instrumented: Arc<dyn ModelBackend> = Arc::new(InstrumentedBackend::new(scripted, Arc::clone(log)));
        match &self.guard {
            Some(g) => Arc::new(GuardedBackend::new(instrumented, Arc::clone(g), Some(Arc::clone(log)))),
            None => instrumented,
        }
    }

    fn scripted(&self, rules: &[ScriptedRule]) -> Arc<ScriptedBackend> {
        let mut b = ScriptedBackend::new(rules.to_vec())
            .expect("rules validated at assembly")
            .with_window(self.config.model.window_tokens)
            .with_unit_price(self.config.model.unit_price);
        if let Some(f) = &self.config.model.fallback {
            b = b.with_fallback(f.clone());
        }
        Arc::new(b)
    }

    fn handle(&self, state: RunState, log: Arc<EventLog>) -> RunHandle {
        let main = self.scripted(&self.rules);
        let gateway = Gateway::new(self.wrap(Arc::clone(&main), &log))
            .with_budget_cap(self.config.model.budget_cap)
            .with_usage(state.usage.clone());
        let mut scripted = vec![main];
        let mut agents = Vec::with_capacity(self.roster.len());
        for m in &self.roster {
            let gw = match &m.rules {
                Some(r) => {
                    let b = self.scripted(r);
                    scripted.push(Arc::clone(&b));
                    gateway.sharing_meter(self.wrap(b, &log))
                }
                None => gateway.clone(),
            };
            agents.push(AgentHandle {
                agent_id: m.entry.agent_id.clone(),
                gateway: gw,
                roles: m.entry.roles.clone(),
                capabilities: m.entry.capabilities.clone(),
                weight: m.entry.weight,
            });
        }
        RunHandle {
            state,
            log,
            gateway,
            agents,
            scripted,
        }
    }

    /// Runs `goal_text` under run id `run-1` on a fresh log.
    pub fn run(&self, goal_text: &str, seed: u64) -> RunHandle {
        self.start("run-1", goal_text, seed)
    }

    /// Starts a run and advances it until it completes, fails, aborts, or
    /// waits for a human.
    pub fn start(&self, run_id: &str, goal_text: &str, seed: u64) -> RunHandle {
        let log = Arc::new(EventLog::new());
        let state = RunState {
            run_id: run_id.to_string(),
            seed,
            goal_text: goal_text.to_string(),
            status: RunStatus::Running,
            stage: Stage::Goal,
            goal: None,
            prompt: None,
            tree: None,
            plan: None,
            refinement: None,
            pending: None,
            posted_feedback: None,
            human_ticks: 0,
            auto_approved_iteration: None,
            step_results: BTreeMap::new(),
            final_answer: None,
            error: None,
            usage: UsageMeter::default(),
            first_seq: log.last_seq() + 1,
        };
        let mut handle = self.handle(state, log);
        handle.log.append(
            ORCHESTRATOR,
            kinds::RUN_STARTED,
            &json!({"run_id": run_id, "goal_text": goal_text, "seed": seed, "patterns": self.active_patterns()}),
        );
        self.advance(&mut handle);
        handle
    }

    /// Rebuilds a handle from persisted state and events.
    pub fn restore(&self, state: RunState, records: Vec<EventRecord>) -> RunHandle {
        self.handle(state, Arc::new(EventLog::from_records(records)))
    }

    /// Hands posted human feedback to a run waiting for it and advances.
    pub fn post_feedback(&self, handle: &mut RunHandle, feedback: HumanFeedback) -> Result<(), OrchestratorError> {
        if !matches!(handle.state.pending, Some(PendingAction::Feedback { .. })) {
            return Err(OrchestratorError::NotAwaiting {
                run_id: handle.state.run_id.clone(),
                expected: "feedback".into(),
            });
        }
        let channel = &self.config.reflection.channel_id;
        human_feedback(channel, feedback.clone())
            .validate()
            .map_err(|e| OrchestratorError::InvalidFeedback(e.to_string()))?;
        handle.log.append(&format!("human:{channel}"), kinds::FEEDBACK_POSTED, &feedback);
        handle.state.posted_feedback = Some(feedback);
        handle.state.pending = None;
        handle.state.status = RunStatus::Running;
        self.advance(handle);
        Ok(())
    }

    /// Selects `option_id` below `node_id` for a run waiting on that choice.
    pub fn post_choice(&self, handle: &mut RunHandle, node_id: &str, option_id: &str) -> Result<(), OrchestratorError> {
        match &handle.state.pending {
            Some(PendingAction::Choice { node_id: want, .. }) if want == node_id => {}
            Some(PendingAction::Choice { node_id: want, .. }) => {
                return Err(OrchestratorError::InvalidChoice(format!("the pending choice is at {want}, not {node_id}")))
            }
            _ => {
                return Err(OrchestratorError::NotAwaiting {
                    run_id: handle.state.run_id.clone(),
                    expected: "choice".into(),
                })
            }
        }
        let tree = handle.state.tree.as_mut().expect("choice pending implies a tree");
        tree.select_branch(node_id, option_id)
            .map_err(|e| OrchestratorError::InvalidChoice(e.to_string()))?;
        let channel = &self.config.reflection.channel_id;
        handle.log.append(
            &format!("human:{channel}"),
            kinds::BRANCH_CHOSEN,
            &json!({"node_id": node_id, "option_id": option_id, "by": "human"}),
        );
        handle.state.pending = None;
        handle.state.status = RunStatus::Running;
        self.advance(handle);
        Ok(())
    }

    /// Polls a waiting run once more without new input. Each poll of an
    /// unanswered feedback request counts one tick toward the timeout.
    pub fn poll(&self, handle: &mut RunHandle) {
        if handle.state.status == RunStatus::AwaitingHuman
            && matches!(handle.state.pending, Some(PendingAction::Feedback { .. }))
        {
            handle.state.status = RunStatus::Running;
            self.advance(handle);
        }
    }

    fn advance(&self, h: &mut RunHandle) {
        while h.state.status == RunStatus::Running {
            let stage = h.state.stage;
            let outcome = match stage {
                Stage::Goal => self.stage_goal(h),
                Stage::Optimise => self.stage_optimise(h),
                Stage::Retrieve => self.stage_retrieve(h),
                Stage::Plan => self.stage_plan(h),
                Stage::Choose => self.stage_choose(h),
                Stage::Reflect => self.stage_reflect(h),
                Stage::Execute => self.stage_execute(h),
                Stage::Respond => self.stage_respond(h),
                Stage::Done => Ok(()),
            };
            if let Err(error) = outcome {
                h.log.append(ORCHESTRATOR, kinds::RUN_FAILED, &json!({"stage": stage, "error": error}));
                h.state.error = Some(error);
                h.state.status = RunStatus::Failed;
            }
        }
        if h.state.status == RunStatus::AwaitingHuman {
            h.log.append(ORCHESTRATOR, kinds::RUN_SUSPENDED, &json!({"stage": h.state.stage, "pending": h.state.pending}));
        }
        h.state.usage = h.gateway.usage();
    }

    // --- stages -------------------------------------------------------------

    fn stage_goal(&self, h: &mut RunHandle) -> StageResult {
        let mut text = h.state.goal_text.clone();
        if let Some(guard) = &self.guard {
            let d = guard.check_input(&text, GuardModality::Text);
            h.log.append(
                GUARD_ACTOR,
                kinds::GUARD_INPUT,
                &json!({"target": "goal", "verdict": status_of(d.verdict), "fired_rules": d.fired_rules}),
            );
            match d.verdict {
                GuardVerdict::Block => {
                    h.log.append(
                        ORCHESTRATOR,
                        kinds::RUN_ABORTED,
                        &json!({"reason": d.rationale, "fired_rules": d.fired_rules}),
                    );
                    h.state.error = Some(format!("goal blocked by guardrails: {}", d.rationale));
                    h.state.status = RunStatus::Aborted;
                    h.state.stage = Stage::Done;
                    return Ok(());
                }
                GuardVerdict::Transform => text = d.content_out.unwrap_or(text),
                GuardVerdict::Pass => {}
            }
        }
        let kb = self.corpus.read().expect("corpus poisoned");
        let mut creator = GoalCreator::new();
        let k = self.config.memory.goal_context_k;
        let goal = match self.config.goal_creator {
            GoalCreatorKind::Passive => creator.create_goal_passive(&text, &kb, k).map_err(|e| e.to_string())?,
            GoalCreatorKind::Proactive => {
                let (goal, note) = creator
                    .create_goal_proactive(Some(&text), &self.detectors, &kb, self.config.detectors.threshold, k)
                    .map_err(|e| e.to_string())?;
                if !note.captured.is_empty() {
                    h.log.append("goal_creator", kinds::NOTIFICATION, &note);
                }
                goal
            }
        };
        drop(kb);
        h.log.append("goal_creator", kinds::GOAL_CREATED, &goal);
        h.state.goal = Some(goal);
        h.state.stage = Stage::Optimise;
        Ok(())
    }

    fn stage_optimise(&self, h: &mut RunHandle) -> StageResult {
        let goal = h.state.goal.as_ref().expect("goal stage ran");
        let prompt = if self.config.optimiser_enabled {
            let meta = RequestMeta {
                actor_id: PLANNER.into(),
                seed: h.state.seed,
                purpose: Purpose::Plan,
                max_completion_tokens: self.config.model.max_completion_tokens,
            };
            let request = self
                .templates
                .optimise_prompt(goal, &self.config.prompts.plan_template, &BTreeMap::new(), &meta)
                .map_err(|e| e.to_string())?;
            h.log.append(
                "optimiser",
                kinds::PROMPT_OPTIMISED,
                &json!({"template_id": self.config.prompts.plan_template, "prompt": request.prompt_text}),
            );
            request.prompt_text
        } else {
            crate::cooperation::workflow::planner_prompt(goal)
        };
        h.state.prompt = Some(prompt);
        h.state.stage = Stage::Retrieve;
        Ok(())
    }

    fn stage_retrieve(&self, h: &mut RunHandle) -> StageResult {
        if self.config.rag_enabled {
            let goal = h.state.goal.as_ref().expect("goal stage ran");
            let kb = self.corpus.read().expect("corpus poisoned");
            let hits = rerank_filter(
                kb.retrieve(&goal.description, self.config.memory.top_k, None),
                self.config.memory.threshold,
            );
            let lines: Vec<String> = hits
                .iter()
                .filter_map(|hit| kb.get(&hit.doc_id).map(|d| format!("- {}", d.text)))
                .collect();
            h.log.append(
                "retriever",
                kinds::CONTEXT_RETRIEVED,
                &json!({"query": goal.description, "hits": hits}),
            );
            if !lines.is_empty() {
                let prompt = h.state.prompt.as_mut().expect("optimise stage ran");
                prompt.push_str("\nCONTEXT:\n");
                prompt.push_str(&lines.join("\n"));
            }
        }
        h.state.stage = Stage::Plan;
        Ok(())
    }

    fn session(&self, h: &RunHandle, suffix: &str) -> Result<ModelSession, String> {
        let prompt = h.state.prompt.clone().unwrap_or_default();
        let window = self.config.model.window_tokens;
        let reserved = count_tokens(&prompt).clamp(1, (window / 2).max(1));
        let session = ModelSession::new(format!("{}-{suffix}", h.state.run_id), PLANNER, window, reserved)
            .map_err(|e| e.to_string())?;
        Ok(session.with_preamble(prompt).with_purpose(Purpose::Plan))
    }

    fn accept_draft(&self, h: &mut RunHandle, plan: Plan) -> StageResult {
        validate_plan(&plan).map_err(|v| format!("plan violates structure: {}", json!(v)))?;
        h.state.refinement = Some(Refinement::new(plan, self.config.reflection.max_iterations).map_err(|e| e.to_string())?);
        h.state.stage = Stage::Reflect;
        Ok(())
    }

    fn stage_plan(&self, h: &mut RunHandle) -> StageResult {
        let goal = h.state.goal.clone().expect("goal stage ran");
        match (self.config.planner, self.config.querying) {
            (PlannerKind::MultiPath, _) => {
                let mut session = self.session(h, "tree")?;
                let tree = generate_multi_path(
                    &goal,
                    &h.gateway,
                    &mut session,
                    self.config.planning.depth,
                    self.config.planning.branching,
                )
                .map_err(|e| e.to_string())?;
                h.log.append(PLANNER, kinds::TREE_GENERATED, &tree);
                h.state.tree = Some(tree);
                h.state.stage = Stage::Choose;
                Ok(())
            }
            (PlannerKind::SinglePath, QueryingKind::OneShot) => {
                let request = ModelRequest::new(h.state.prompt.clone().unwrap_or_default(), PLANNER)
                    .with_seed(h.state.seed)
                    .with_max_completion(self.config.model.max_completion_tokens);
                let plan = generate_single_path(&goal, &h.gateway, &request, self.config.planning.n_samples)
                    .map_err(|e| e.to_string())?;
                h.log.append(PLANNER, kinds::PLAN_GENERATED, &plan);
                self.accept_draft(h, plan)
            }
            (PlannerKind::SinglePath, QueryingKind::Incremental) => {
                let mut session = self.session(h, "steps")?;
                let plan = generate_single_path_incremental(&goal, &h.gateway, &mut session, self.config.planning.max_steps)
                    .map_err(|e| e.to_string())?;
                h.log.append(PLANNER, kinds::PLAN_GENERATED, &plan);
                self.accept_draft(h, plan)
            }
        }
    }

    fn voters(&self, h: &RunHandle) -> Vec<AgentHandle> {
        h.agents.iter().filter(|a| a.has_role(ROLE_VOTER)).cloned().collect()
    }

    fn stage_choose(&self, h: &mut RunHandle) -> StageResult {
        loop {
            let tree = h.state.tree.as_ref().expect("tree generated");
            let Some(node_id) = tree.next_pending_choice() else {
                let plan = tree.linearize().map_err(|e| e.to_string())?;
                h.log.append(PLANNER, kinds::PLAN_GENERATED, &plan);
                return self.accept_draft(h, plan);
            };
            let children: Vec<String> = tree.children(&node_id).to_vec();
            let options: Vec<StepOption> = children.iter().map(|c| tree.nodes[c].option.clone()).collect();
            let chosen = match self.config.planning.branch_policy {
                None => {
                    h.log.append(
                        ORCHESTRATOR,
                        kinds::CHOICE_REQUESTED,
                        &json!({"node_id": node_id, "options": options}),
                    );
                    h.state.pending = Some(PendingAction::Choice { node_id, options });
                    h.state.status = RunStatus::AwaitingHuman;
                    return Ok(());
                }
                Some(BranchPolicy::First) => (children[0].clone(), "first"),
                Some(BranchPolicy::Vote) => {
                    let candidates: Vec<String> = options.iter().map(|o| o.description.clone()).collect();
                    let question = format!("choose the next step after {}", tree.nodes[&node_id].option.description);
                    let outcome = run_vote(
                        &question,
                        &candidates,
                        &self.voters(h),
                        self.config.roster.vote_method,
                        h.state.seed,
                        &h.log,
                    )
                    .map_err(|e| e.to_string())?;
                    let idx = candidates.iter().position(|c| *c == outcome.result.winner).unwrap_or(0);
                    (children[idx].clone(), "vote")
                }
            };
            let tree = h.state.tree.as_mut().expect("tree generated");
            tree.select_branch(&node_id, &chosen.0).map_err(|e| e.to_string())?;
            h.log.append(
                ORCHESTRATOR,
                kinds::BRANCH_CHOSEN,
                &json!({"node_id": node_id, "option_id": chosen.0, "by": chosen.1}),
            );
        }
    }

    /// Runs the automated reviewers for one iteration. Each verdict is
    /// logged once.
    fn automated_review(&self, h: &RunHandle, plan: &Plan, iteration: usize) -> Result<Vec<ReflectionFeedback>, String> {
        let seed = h.state.seed + iteration as u64;
        let mut out = Vec::new();
        if self.config.reflectors.contains(&ReflectorKind::SelfReview) {
            let fb = self_reflect(plan, &h.gateway, REFLECTOR, seed).map_err(|e| e.to_string())?;
            h.log.append(REFLECTOR, kinds::REFLECTION, &json!({"iteration": iteration, "feedback": fb}));
            out.push(fb);
        }
        if self.config.reflectors.contains(&ReflectorKind::Cross) {
            let reviewers: Vec<Reviewer> = h
                .agents
                .iter()
                .filter(|a| a.has_role(ROLE_REVIEWER))
                .map(|a| Reviewer::new(a.agent_id.clone(), a.gateway.clone()))
                .collect();
            let policy = self.config.reflection.policy;
            let (_, feedback) = cross_reflect(plan, &reviewers, policy, seed).map_err(|e| e.to_string())?;
            for fb in &feedback {
                let actor = match &fb.source {
                    FeedbackSource::Agent { reviewer_id } => reviewer_id.clone(),
                    _ => REFLECTOR.to_string(),
                };
                h.log.append(&actor, kinds::REFLECTION, &json!({"iteration": iteration, "feedback": fb}));
            }
            let split = feedback.iter().any(|f| f.verdict != feedback[0].verdict);
            let panel = if split && self.config.cooperation.contains(&CooperationKind::Voting) {
                // Contested review: the roster's voters settle it.
                let candidates = vec!["approve".to_string(), "revise".to_string()];
                let question = format!("approve plan {}?", plan.digest());
                let outcome = run_vote(
                    &question,
                    &candidates,
                    &self.voters(h),
                    self.config.roster.vote_method,
                    seed,
                    &h.log,
                )
                .map_err(|e| e.to_string())?;
                let policy = if outcome.result.winner == "approve" {
                    AggregationPolicy::Majority
                } else {
                    AggregationPolicy::Unanimity
                };
                let mut combined = combine_feedback(policy, &feedback);
                if outcome.result.winner == "approve" {
                    combined = ReflectionFeedback::approve(combined.source);
                }
                combined
            } else {
                combine_feedback(policy, &feedback)
            };
            out.push(panel);
        }
        Ok(out)
    }

    fn stage_reflect(&self, h: &mut RunHandle) -> StageResult {
        if self.config.reflectors.is_empty() {
            let r = h.state.refinement.as_mut().expect("draft accepted");
            r.plan.status = PlanStatus::Approved;
            return self.approve(h);
        }
        let (plan, iteration) = {
            let r = h.state.refinement.as_ref().expect("draft accepted");
            (r.plan.clone(), r.iterations())
        };
        let seed = h.state.seed + iteration as u64;
        let automated = if h.state.auto_approved_iteration == Some(iteration) {
            Vec::new()
        } else {
            self.automated_review(h, &plan, iteration)?
        };
        let revise: Vec<ReflectionFeedback> = automated.iter().filter(|f| f.verdict == Verdict::Revise).cloned().collect();
        let feedback = if !revise.is_empty() {
            if revise.len() == 1 {
                revise.into_iter().next().expect("one element")
            } else {
                combine_feedback(AggregationPolicy::Unanimity, &revise)
            }
        } else if self.config.reflectors.contains(&ReflectorKind::Human) {
            h.state.auto_approved_iteration = Some(iteration);
            match h.state.posted_feedback.take() {
                Some(f) => human_feedback(&self.config.reflection.channel_id, f),
                None => {
                    if let Some(limit) = self.config.reflection.human_timeout_ticks {
                        if h.state.human_ticks >= limit {
                            h.state.refinement.as_mut().expect("draft accepted").time_out();
                            h.state.pending = None;
                            return Err(format!("{} after {limit} ticks", crate::reflection::ReflectionError::HumanTimeout));
                        }
                    }
                    h.state.human_ticks += 1;
                    if h.state.pending.is_none() {
                        let digest = plan.digest();
                        h.log.append(
                            ORCHESTRATOR,
                            kinds::FEEDBACK_REQUEST,
                            &json!({"iteration": iteration, "plan_digest": digest, "plan": plan}),
                        );
                        h.state.pending = Some(PendingAction::Feedback {
                            plan,
                            plan_digest: digest,
                            iteration,
                        });
                    }
                    h.state.status = RunStatus::AwaitingHuman;
                    return Ok(());
                }
            }
        } else if automated.len() == 1 {
            automated.into_iter().next().expect("one element")
        } else {
            combine_feedback(AggregationPolicy::Unanimity, &automated)
        };
        h.state.human_ticks = 0;
        h.state.auto_approved_iteration = None;

        let gateway = h.gateway.clone();
        let r = h.state.refinement.as_mut().expect("draft accepted");
        let step = r
            .apply(feedback, |p, f| revise_plan(p, f, &gateway, PLANNER, seed))
            .map_err(|e| e.to_string())?;
        match step {
            RefineStep::Approved => self.approve(h),
            RefineStep::Revised => {
                let plan = r.plan.clone();
                h.log.append(PLANNER, kinds::PLAN_REVISED, &json!({"iteration": iteration + 1, "plan": plan}));
                validate_plan(&plan).map_err(|v| format!("revised plan violates structure: {}", json!(v)))?;
                Ok(())
            }
            RefineStep::Exhausted => Err(format!("plan not approved after {} reflections", r.iterations())),
        }
    }

    fn approve(&self, h: &mut RunHandle) -> StageResult {
        let r = h.state.refinement.as_ref().expect("draft accepted");
        h.log.append(
            ORCHESTRATOR,
            kinds::PLAN_APPROVED,
            &json!({"plan_id": r.plan.plan_id, "plan_digest": r.plan.digest(), "iterations": r.iterations()}),
        );
        h.state.plan = Some(r.plan.clone());
        h.state.stage = Stage::Execute;
        Ok(())
    }

    /// Runs one step through a registered tool when one offers the step's
    /// capability, else through the model.
    fn execute_step(&self, log: &EventLog, actor: &str, gateway: &Gateway, seed: u64, step: &Step) -> Result<String, String> {
        if self.config.registry_enabled && self.config.adapter_enabled {
            if let Some(cap) = &step.required_capability {
                let required = BTreeSet::from([cap.clone()]);
                let found = self.registry.discover(&required, &DiscoverConstraints::default(), Objective::MinPrice);
                let entry = found.ok().and_then(|v| v.into_iter().next());
                if let Some(descriptor) = entry
                    .as_ref()
                    .and_then(|e| e.descriptor_ref.as_ref())
                    .and_then(|d| self.descriptors.get(d))
                {
                    let entry_id = entry.as_ref().map(|e| e.entry_id.clone()).unwrap_or_default();
                    let attempt = select_operation(descriptor, step)
                        .map(|op| derive_args(op, &step.description))
                        .and_then(|args| adapt_invoke(descriptor, step, &args, &self.toolbox));
                    return match attempt {
                        Ok(r) => {
                            log.append(
                                actor,
                                kinds::TOOL_INVOCATION,
                                &json!({"step_id": step.step_id, "entry_id": entry_id, "call": r.call,
                                        "status": r.status, "raw": r.raw}),
                            );
                            match (r.status, r.parsed) {
                                (ToolStatus::Ok, Some(parsed)) => Ok(parsed.primary_text()),
                                _ => Err(format!("{} output does not match its result shape: {}", r.call, r.raw)),
                            }
                        }
                        Err(e) => {
                            log.append(
                                actor,
                                kinds::TOOL_INVOCATION,
                                &json!({"step_id": step.step_id, "entry_id": entry_id, "status": "error",
                                        "error": e.to_string()}),
                            );
                            Err(e.to_string())
                        }
                    };
                }
            }
        }
        let request = ModelRequest::new(crate::cooperation::workflow::execute_prompt(step), actor)
            .with_seed(seed)
            .with_purpose(Purpose::Other)
            .with_max_completion(self.config.model.max_completion_tokens);
        let response = gateway.one_shot_query(&request).map_err(|e| e.to_string())?;
        if response.finish_reason == FinishReason::Blocked {
            return Err(format!("output for {} blocked by guardrails", step.step_id));
        }
        Ok(response.text.trim().to_string())
    }

    fn stage_execute(&self, h: &mut RunHandle) -> StageResult {
        let plan = h.state.plan.clone().expect("plan approved");
        let seed = h.state.seed;
        if self.config.cooperation.contains(&CooperationKind::RoleBased) {
            let log = Arc::clone(&h.log);
            let mut executor = |worker: &AgentHandle, step: &Step, _: &BTreeMap<String, String>| {
                self.execute_step(&log, &worker.agent_id, &worker.gateway, seed, step)
            };
            let (result, plan) = execute_with_roles(plan, &h.agents, &h.log, &mut executor).map_err(|e| e.to_string())?;
            h.state.step_results = result.step_results;
            h.state.plan = Some(plan);
        } else {
            let mut plan = plan;
            for i in 0..plan.steps.len() {
                plan.steps[i].status = StepStatus::InProgress;
                let step = plan.steps[i].clone();
                match self.execute_step(&h.log, EXECUTOR, &h.gateway, seed, &step) {
                    Ok(text) => {
                        h.log.append(
                            EXECUTOR,
                            kinds::STEP_RESULT,
                            &json!({"step_id": step.step_id, "status": "done", "result": text}),
                        );
                        plan.steps[i].status = StepStatus::Done;
                        h.state.step_results.insert(step.step_id.clone(), text);
                    }
                    Err(reason) => {
                        h.log.append(
                            EXECUTOR,
                            kinds::STEP_RESULT,
                            &json!({"step_id": step.step_id, "status": "failed", "reason": reason}),
                        );
                        plan.steps[i].status = StepStatus::Failed;
                        h.state.plan = Some(plan);
                        return Err(format!("step {} failed: {reason}", step.step_id));
                    }
                }
            }
            h.state.plan = Some(plan);
        }
        if let Some(plan) = h.state.plan.as_mut() {
            plan.status = PlanStatus::Complete;
        }
        h.state.stage = Stage::Respond;
        Ok(())
    }

    fn stage_respond(&self, h: &mut RunHandle) -> StageResult {
        let plan = h.state.plan.as_ref().expect("plan executed");
        let goal = h.state.goal.as_ref().expect("goal stage ran");
        let mut answer = plan
            .steps
            .last()
            .and_then(|s| h.state.step_results.get(&s.step_id))
            .cloned()
            .unwrap_or_default();
        if self.config.cooperation.contains(&CooperationKind::Debate) {
            let debaters: Vec<AgentHandle> = h.agents.iter().filter(|a| a.has_role(ROLE_DEBATER)).cloned().collect();
            let question = format!("ANSWER {answer} FOR {}", goal.description);
            let transcript =
                run_debate(&question, &debaters, self.config.roster.max_rounds, &h.log).map_err(|e| e.to_string())?;
            if transcript.consensus.is_some() {
                if let Some(first) = transcript.rounds.last().and_then(|r| r.first()) {
                    answer = first.statement.trim().to_string();
                }
            }
        }
        if self.config.optimiser_enabled {
            let spec = self.config.output.clone().unwrap_or_else(|| OutputSpec::plain("final"));
            let structured = optimise_response(&answer, &spec).map_err(|e| format!("final answer: {e}"))?;
            answer = structured.primary_text();
            h.log.append("optimiser", kinds::RESPONSE_OPTIMISED, &json!({"spec_id": spec.spec_id, "response": structured}));
        }
        if let Some(guard) = &self.guard {
            let d = guard.check_output(&answer, GuardModality::Text);
            h.log.append(
                GUARD_ACTOR,
                kinds::GUARD_OUTPUT,
                &json!({"target": "final_answer", "verdict": status_of(d.verdict), "fired_rules": d.fired_rules}),
            );
            match d.verdict {
                GuardVerdict::Block => return Err(format!("final answer blocked by guardrails: {}", d.rationale)),
                GuardVerdict::Transform => answer = d.content_out.unwrap_or(answer),
                GuardVerdict::Pass => {}
            }
        }
        let digest = h.state.plan.as_ref().map(Plan::digest);
        h.log.append(
            ORCHESTRATOR,
            kinds::RUN_COMPLETED,
            &json!({"final_answer": answer, "plan_digest": digest}),
        );
        h.state.final_answer = Some(answer);
        h.state.status = RunStatus::Complete;
        h.state.stage = Stage::Done;
        Ok(())
    }
}

// ============================================================================
// Evaluation
// ============================================================================

impl crate::evaluator::CaseRunner for AgentRuntime {
    /// A fresh run per case, named after the case. Anything short of a
    /// completed run is a case failure.
    fn run_case(&self, case: &crate::evaluator::EvalCase, seed: u64) -> Result<crate::evaluator::CaseOutput, String> {
        let handle = self.start(&case.case_id, &case.input, seed);
        let r = handle.result();
        match (r.status, r.final_answer) {
            (RunStatus::Complete, Some(answer)) => Ok(crate::evaluator::CaseOutput {
                answer,
                plan_steps: r.final_plan.map(|p| p.steps.len()).unwrap_or(0),
            }),
            (status, _) => Err(r.error.unwrap_or_else(|| format!("run ended with status {}", json!(status)))),
        }
    }
}
