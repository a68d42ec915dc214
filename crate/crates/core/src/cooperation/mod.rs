//! Multi-agent cooperation: voting, role-based workflows and debate.
//!
//! Agents are [`AgentHandle`]s that each own a [`Gateway`]. Every ballot,
//! statement, assignment and spawn is appended to an [`EventLog`], and the
//! `replay_*` functions rebuild the protocol results from that log alone.
//!
//! [`EventLog`]: crate::audit::EventLog

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, ScriptedBackend};

pub mod debate;
pub mod vote;
pub mod workflow;

pub use debate::{detect_consensus, replay_debate, run_debate, DebateTermination, DebateTranscript, Statement};
pub use vote::{replay_vote, run_vote, tally, Ballot, VoteMethod, VoteOutcome, VoteResult};
pub use workflow::{execute_with_roles, replay_workflow, run_role_workflow, run_role_workflow_with, WorkflowResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoopError {
    #[error("at least {min} {what} required, got {got}")]
    TooFew { what: &'static str, min: usize, got: usize },
    #[error("duplicate agent id {0}")]
    DuplicateAgent(String),
    #[error("every voter abstained")]
    AllAbstained,
    #[error("roster needs exactly one {0}")]
    MissingRole(String),
    #[error("no worker can perform step {0}")]
    NoCapableWorker(String),
    #[error("max_rounds must be at least 1")]
    InvalidRounds,
    #[error("agent {agent_id} failed in round {round}: {source}")]
    AgentFailed {
        agent_id: String,
        round: usize,
        source: GatewayError,
    },
    #[error("planning failed: {0}")]
    Planning(String),
    #[error("step {step_id} failed: {reason}")]
    StepFailed { step_id: String, reason: String },
    #[error("roster: {0}")]
    Roster(String),
    #[error("event log does not describe a complete {0}")]
    Replay(&'static str),
}

pub const ROLE_PLANNER: &str = "planner";
pub const ROLE_ASSIGNER: &str = "assigner";
pub const ROLE_WORKER: &str = "worker";
pub const ROLE_CREATOR: &str = "creator";

#[derive(Debug, Clone)]
pub struct AgentHandle {
    pub agent_id: String,
    pub gateway: Gateway,
    pub roles: BTreeSet<String>,
    pub capabilities: BTreeSet<String>,
    pub weight: f64,
}

impl AgentHandle {
    pub fn new(agent_id: impl Into<String>, gateway: Gateway) -> Self {
        Self {
            agent_id: agent_id.into(),
            gateway,
            roles: BTreeSet::new(),
            capabilities: BTreeSet::new(),
            weight: 1.0,
        }
    }

    pub fn with_roles<I: IntoIterator<Item = S>, S: Into<String>>(mut self, roles: I) -> Self {
        self.roles = roles.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_capabilities<I: IntoIterator<Item = S>, S: Into<String>>(mut self, caps: I) -> Self {
        self.capabilities = caps.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn has_role(&self, role: &str) -> bool {
        self.roles.contains(role)
    }
}

/// One record of a roster file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub agent_id: String,
    #[serde(default)]
    pub roles: BTreeSet<String>,
    #[serde(default)]
    pub capabilities: BTreeSet<String>,
    #[serde(default = "default_weight")]
    pub weight: f64,
    #[serde(default)]
    pub rules_path: Option<String>,
}

fn default_weight() -> f64 {
    1.0
}

pub fn check_unique(agents: &[AgentHandle]) -> Result<(), CoopError> {
    let mut seen = BTreeSet::new();
    for a in agents {
        if !seen.insert(a.agent_id.as_str()) {
            return Err(CoopError::DuplicateAgent(a.agent_id.clone()));
        }
    }
    Ok(())
}

/// Builds handles from roster entries. `rules_path` is resolved against
/// `base_dir`; entries without one share `fallback`.
pub fn roster_from_entries(
    entries: &[RosterEntry],
    base_dir: &Path,
    fallback: Option<&Gateway>,
) -> Result<Vec<AgentHandle>, CoopError> {
    let mut agents = Vec::with_capacity(entries.len());
    for e in entries {
        if !(e.weight > 0.0 && e.weight.is_finite()) {
            return Err(CoopError::Roster(format!("{}: weight must be positive", e.agent_id)));
        }
        let gateway = match &e.rules_path {
            Some(p) => {
                let path = base_dir.join(p);
                let source = std::fs::read_to_string(&path)
                    .map_err(|err| CoopError::Roster(format!("{}: {err}", path.display())))?;
                let backend = ScriptedBackend::from_rule_file(&source)
                    .map_err(|err| CoopError::Roster(format!("{}: {err}", path.display())))?;
                Gateway::scripted(backend)
            }
            None => fallback
                .cloned()
                .ok_or_else(|| CoopError::Roster(format!("{}: no rules_path and no default backend", e.agent_id)))?,
        };
        agents.push(AgentHandle {
            agent_id: e.agent_id.clone(),
            gateway,
            roles: e.roles.clone(),
            capabilities: e.capabilities.clone(),
            weight: e.weight,
        });
    }
    check_unique(&agents)?;
    Ok(agents)
}

pub fn load_roster(path: &Path, fallback: Option<&Gateway>) -> Result<Vec<AgentHandle>, CoopError> {
    let source = std::fs::read_to_string(path).map_err(|e| CoopError::Roster(format!("{}: {e}", path.display())))?;
    let entries: Vec<RosterEntry> =
        serde_json::from_str(&source).map_err(|e| CoopError::Roster(format!("{}: {e}", path.display())))?;
    roster_from_entries(&entries, path.parent().unwrap_or(Path::new(".")), fallback)
}
