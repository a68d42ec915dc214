//! Pattern configuration.
//!
//! A config is a JSON object. The top-level keys select patterns and the
//! nested sections carry per-pattern parameters. Every section and key is
//! optional; omitted values take the baseline defaults shown below.
//!
//! ```json
//! {
//!   "goal_creator": "passive",
//!   "optimiser_enabled": true,
//!   "rag_enabled": false,
//!   "querying": "one_shot",
//!   "planner": "single_path",
//!   "reflectors": ["self"],
//!   "cooperation": [],
//!   "guardrails_enabled": true,
//!   "registry_enabled": true,
//!   "adapter_enabled": true,
//!   "evaluator_enabled": false,
//!   "model": { "rules_path": null, "window_tokens": 4096, "unit_price": 0.0,
//!              "budget_cap": null, "fallback": null, "max_completion_tokens": 256 },
//!   "prompts": { "dir": null, "plan_template": "plan" },
//!   "memory": { "corpus_path": null, "top_k": 3, "threshold": 0.0, "goal_context_k": 0 },
//!   "detectors": { "path": null, "threshold": 0.5 },
//!   "planning": { "n_samples": 1, "max_steps": 8, "depth": 2, "branching": 2,
//!                 "branch_policy": null },
//!   "reflection": { "max_iterations": 3, "policy": "unanimity",
//!                   "human_timeout_ticks": null, "channel_id": "web" },
//!   "guardrails": { "path": null },
//!   "registry": { "path": null, "manuals_dir": null },
//!   "roster": { "path": null, "max_rounds": 3, "vote_method": "head_count" },
//!   "output": null
//! }
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! A `null` path selects the bundled default resource.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::cooperation::VoteMethod;
use crate::prompt::OutputSpec;
use crate::reflection::AggregationPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GoalCreatorKind {
    #[default]
    Passive,
    Proactive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryingKind {
    #[default]
    OneShot,
    Incremental,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    #[default]
    SinglePath,
    MultiPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectorKind {
    #[serde(rename = "self")]
    SelfReview,
    Cross,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CooperationKind {
    Voting,
    RoleBased,
    Debate,
}

/// How a multi-path tree is resolved when no human picks branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchPolicy {
    /// The lowest-numbered option at each level.
    First,
    /// A vote among the roster's voters.
    Vote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub rules_path: Option<String>,
    pub window_tokens: usize,
    pub unit_price: f64,
    pub budget_cap: Option<f64>,
    pub fallback: Option<String>,
    pub max_completion_tokens: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            rules_path: None,
            window_tokens: crate::gateway::DEFAULT_WINDOW_TOKENS,
            unit_price: 0.0,
            budget_cap: None,
            fallback: None,
            max_completion_tokens: crate::gateway::DEFAULT_MAX_COMPLETION_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptsSection {
    pub dir: Option<String>,
    pub plan_template: String,
}

impl Default for PromptsSection {
    fn default() -> Self {
        Self {
            dir: None,
            plan_template: "plan".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemorySection {
    /// JSON-lines corpus of documents.
    pub corpus_path: Option<String>,
    pub top_k: usize,
    /// Minimum cosine similarity kept after retrieval.
    pub threshold: f64,
    /// Memories attached to a goal at creation time.
    pub goal_context_k: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self {
            corpus_path: None,
            top_k: 3,
            threshold: 0.0,
            goal_context_k: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorsSection {
    pub path: Option<String>,
    pub threshold: f64,
}

impl Default for DetectorsSection {
    fn default() -> Self {
        Self {
            path: None,
            threshold: crate::goal::DEFAULT_PROACTIVE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanningSection {
    pub n_samples: usize,
    pub max_steps: usize,
    pub depth: usize,
    pub branching: usize,
    pub branch_policy: Option<BranchPolicy>,
}

impl Default for PlanningSection {
    fn default() -> Self {
        Self {
            n_samples: 1,
            max_steps: 8,
            depth: 2,
            branching: 2,
            branch_policy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReflectionSection {
    pub max_iterations: usize,
    pub policy: AggregationPolicy,
    pub human_timeout_ticks: Option<u64>,
    pub channel_id: String,
}

impl Default for ReflectionSection {
    fn default() -> Self {
        Self {
            max_iterations: 3,
            policy: AggregationPolicy::Unanimity,
            human_timeout_ticks: None,
            channel_id: "web".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PathSection {
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RegistrySection {
    pub path: Option<String>,
    /// Extra `*.manual` files learned at assembly.
    pub manuals_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RosterSection {
    pub path: Option<String>,
    pub max_rounds: usize,
    pub vote_method: VoteMethod,
}

impl Default for RosterSection {
    fn default() -> Self {
        Self {
            path: None,
            max_rounds: 3,
            vote_method: VoteMethod::HeadCount,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternConfig {
    pub goal_creator: GoalCreatorKind,
    pub optimiser_enabled: bool,
    pub rag_enabled: bool,
    pub querying: QueryingKind,
    pub planner: PlannerKind,
    pub reflectors: BTreeSet<ReflectorKind>,
    pub cooperation: BTreeSet<CooperationKind>,
    pub guardrails_enabled: bool,
    pub registry_enabled: bool,
    pub adapter_enabled: bool,
    pub evaluator_enabled: bool,

    pub model: ModelSection,
    pub prompts: PromptsSection,
    pub memory: MemorySection,
    pub detectors: DetectorsSection,
    pub planning: PlanningSection,
    pub reflection: ReflectionSection,
    pub guardrails: PathSection,
    pub registry: RegistrySection,
    pub roster: RosterSection,
    /// Shape the final answer is parsed into by the response optimiser.
    pub output: Option<OutputSpec>,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

impl PatternConfig {
    /// Passive goals, optimiser on, one-shot single-path planning, self
    /// reflection, no cooperation, guardrails, registry and adapter on.
    pub fn baseline() -> Self {
        Self {
            goal_creator: GoalCreatorKind::Passive,
            optimiser_enabled: true,
            rag_enabled: false,
            querying: QueryingKind::OneShot,
            planner: PlannerKind::SinglePath,
            reflectors: BTreeSet::from([ReflectorKind::SelfReview]),
            cooperation: BTreeSet::new(),
            guardrails_enabled: true,
            registry_enabled: true,
            adapter_enabled: true,
            evaluator_enabled: false,
            model: ModelSection::default(),
            prompts: PromptsSection::default(),
            memory: MemorySection::default(),
            detectors: DetectorsSection::default(),
            planning: PlanningSection::default(),
            reflection: ReflectionSection::default(),
            guardrails: PathSection::default(),
            registry: RegistrySection::default(),
            roster: RosterSection::default(),
            output: None,
        }
    }

    pub fn from_json(source: &str) -> Result<Self, OrchestratorError> {
        serde_json::from_str(source).map_err(|e| OrchestratorError::InvalidConfig(format!("config does not parse: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let source = std::fs::read_to_string(path)
            .map_err(|_| OrchestratorError::MissingResource(path.display().to_string()))?;
        Self::from_json(&source)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Names of the selected patterns, e.g. `passive`, `self_reflection`.
    pub fn active_patterns(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        out.insert(
            match self.goal_creator {
                GoalCreatorKind::Passive => "passive_goal_creator",
                GoalCreatorKind::Proactive => "proactive_goal_creator",
            }
            .to_string(),
        );
        out.insert(
            match self.querying {
                QueryingKind::OneShot => "one_shot_model_querying",
                QueryingKind::Incremental => "incremental_model_querying",
            }
            .to_string(),
        );
        out.insert(
            match self.planner {
                PlannerKind::SinglePath => "single_path_plan_generator",
                PlannerKind::MultiPath => "multi_path_plan_generator",
            }
            .to_string(),
        );
        for r in &self.reflectors {
            out.insert(
                match r {
                    ReflectorKind::SelfReview => "self_reflection",
                    ReflectorKind::Cross => "cross_reflection",
                    ReflectorKind::Human => "human_reflection",
                }
                .to_string(),
            );
        }
        for c in &self.cooperation {
            out.insert(
                match c {
                    CooperationKind::Voting => "voting_based_cooperation",
                    CooperationKind::RoleBased => "role_based_cooperation",
                    CooperationKind::Debate => "debate_based_cooperation",
                }
                .to_string(),
            );
        }
        for (on, name) in [
            (self.optimiser_enabled, "prompt_response_optimiser"),
            (self.rag_enabled, "retrieval_augmented_generation"),
            (self.guardrails_enabled, "multimodal_guardrails"),
            (self.registry_enabled, "tool_agent_registry"),
            (self.adapter_enabled, "agent_adapter"),
            (self.evaluator_enabled, "agent_evaluator"),
        ] {
            if on {
                out.insert(name.to_string());
            }
        }
        out
    }

    /// Structural invariants that need no files. Roster-dependent checks
    /// happen in `assemble`.
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::InvalidConfig(m.to_string()));
        if self.planner == PlannerKind::MultiPath
            && !self.reflectors.contains(&ReflectorKind::Human)
            && self.planning.branch_policy.is_none()
        {
            return bad("multi_path planning needs the human reflector or a branch_policy");
        }
        if self.planning.branch_policy == Some(BranchPolicy::Vote) && !self.cooperation.contains(&CooperationKind::Voting) {
            return bad("branch_policy \"vote\" needs voting in cooperation");
        }
        if self.planning.n_samples == 0 {
            return bad("planning.n_samples must be at least 1");
        }
        if self.planning.max_steps == 0 {
            return bad("planning.max_steps must be at least 1");
        }
        if self.planner == PlannerKind::MultiPath && (self.planning.depth == 0 || self.planning.branching == 0) {
            return bad("planning.depth and planning.branching must be at least 1");
        }
        if self.reflection.max_iterations == 0 {
            return bad("reflection.max_iterations must be at least 1");
        }
        if self.roster.max_rounds == 0 {
            return bad("roster.max_rounds must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.detectors.threshold) {
            return bad("detectors.threshold must lie in [0, 1]");
        }
        if !(self.model.unit_price >= 0.0 && self.model.unit_price.is_finite()) {
            return bad("model.unit_price must be a non-negative number");
        }
        if self.model.window_tokens == 0 {
            return bad("model.window_tokens must be positive");
        }
        if self.adapter_enabled && !self.registry_enabled {
            return bad("adapter_enabled needs registry_enabled");
        }
        if let Some(spec) = &self.output {
            spec.validate().map_err(|e| OrchestratorError::InvalidConfig(format!("output: {e}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_baseline() {
        assert_eq!(PatternConfig::from_json("{}").unwrap(), PatternConfig::baseline());
        let round = PatternConfig::from_json(&PatternConfig::baseline().to_json()).unwrap();
        assert_eq!(round, PatternConfig::baseline());
    }

    #[test]
    fn reflector_names() {
        let c = PatternConfig::from_json(r#"{"reflectors": ["self", "human"], "cooperation": ["role_based"]}"#).unwrap();
        assert!(c.reflectors.contains(&ReflectorKind::SelfReview));
        assert!(c.active_patterns().contains("human_reflection"));
        assert!(c.active_patterns().contains("role_based_cooperation"));
    }

    #[test]
    fn multi_path_needs_a_chooser() {
        let mut c = PatternConfig::baseline();
        c.planner = PlannerKind::MultiPath;
        assert!(matches!(c.validate(), Err(OrchestratorError::InvalidConfig(_))));
        c.planning.branch_policy = Some(BranchPolicy::First);
        assert!(c.validate().is_ok());
        c.planning.branch_policy = None;
        c.reflectors.insert(ReflectorKind::Human);
        assert!(c.validate().is_ok());
    }
}
