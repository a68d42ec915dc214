//! Wires the patterns into a runnable agent.
//!
//! [`decide_patterns`] turns quality requirements into a [`PatternConfig`],
//! [`assemble`] loads every resource the config names, and
//! [`AgentRuntime::run`] drives a goal through the pipeline:
//!
//! ```text
//! goal creation -> prompt optimiser -> retrieval -> planning
//!   -> (branch choice) -> reflection loop -> step execution -> response
//! ```
//!
//! Optional stages are skipped when their pattern is off. A run that needs
//! a human verdict or branch choice suspends with status `awaiting_human`
//! and resumes through [`AgentRuntime::post_feedback`] or
//! [`AgentRuntime::post_choice`].

use thiserror::Error;

pub mod config;
pub mod decision;
pub mod runtime;
pub mod store;

pub use config::{
    BranchPolicy, CooperationKind, GoalCreatorKind, PatternConfig, PlannerKind, QueryingKind, ReflectorKind,
};
pub use decision::{decide_patterns, decision_graph, vocabulary, DecisionNode, DecisionReport, Relation};
pub use runtime::{
    assemble, AgentRuntime, InstrumentedBackend, PendingAction, RunHandle, RunResult, RunState, RunStatus, Stage,
};
pub use store::RunStore;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestratorError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing resource: {0}")]
    MissingResource(String),
    #[error("unknown requirement tag {0:?}")]
    UnknownRequirement(String),
    #[error("decision {decision_id} cannot be resolved for tags {tags:?}")]
    ConflictUnresolvable { decision_id: String, tags: Vec<String> },
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run {run_id} is not waiting for {expected}")]
    NotAwaiting { run_id: String, expected: String },
    #[error("invalid feedback: {0}")]
    InvalidFeedback(String),
    #[error("invalid choice: {0}")]
    InvalidChoice(String),
    #[error("state store: {0}")]
    Store(String),
}
