//! Agora: composable building blocks for foundation-model agents.
//!
//! The crate is organised around the agent pipeline: a metered model
//! gateway, goal creation, prompt/response optimisation, retrieval memory,
//! planning, reflection, multi-agent cooperation, guardrails, tool
//! registries and adapters, a scenario evaluator, and an orchestrator that
//! wires them together behind an HTTP API and a CLI. Every observable
//! action is appended to a hash-chained event log.

pub mod audit;
pub mod cooperation;
pub mod evaluator;
pub mod gateway;
pub mod goal;
pub mod guardrails;
pub mod memory;
pub mod orchestrator;
pub mod planning;
pub mod prompt;
pub mod reflection;
pub mod server;
pub mod text;
pub mod tooling;
