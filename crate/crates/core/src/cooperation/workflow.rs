//! Role-based cooperation: a planner decomposes the goal, an assigner maps
//! steps to capable workers, a creator spawns missing workers, and workers
//! execute their steps in plan order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{check_unique, AgentHandle, CoopError, ROLE_ASSIGNER, ROLE_CREATOR, ROLE_PLANNER, ROLE_WORKER};
use crate::audit::{kinds, EventLog, EventRecord};
use crate::gateway::{ModelRequest, Purpose};
use crate::goal::Goal;
use crate::planning::{generate_single_path, Plan, Step, StepStatus};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct WorkflowResult {
    pub plan_id: String,
    pub assignments: BTreeMap<String, String>,
    pub spawned_agents: Vec<String>,
    pub step_results: BTreeMap<String, String>,
}

pub fn planner_prompt(goal: &Goal) -> String {
    format!("PLAN: {}", goal.description)
}

pub fn execute_prompt(step: &Step) -> String {
    format!("EXECUTE {}: {}", step.step_id, step.description)
}

fn single_with_role<'a>(roster: &'a [AgentHandle], role: &str) -> Result<&'a AgentHandle, CoopError> {
    let mut holders = roster.iter().filter(|a| a.has_role(role));
    match (holders.next(), holders.next()) {
        (Some(a), None) => Ok(a),
        _ => Err(CoopError::MissingRole(role.to_string())),
    }
}

/// Runs the workflow with workers answering through their own backends.
pub fn run_role_workflow(goal: &Goal, roster: &[AgentHandle], log: &EventLog) -> Result<(WorkflowResult, Plan), CoopError> {
    run_role_workflow_with(goal, roster, log, &mut |worker, step, _| {
        let request = ModelRequest::new(execute_prompt(step), &worker.agent_id).with_purpose(Purpose::Other);
        worker
            .gateway
            .one_shot_query(&request)
            .map(|r| r.text.trim().to_string())
            .map_err(|e| e.to_string())
    })
}

/// Runs the workflow with a caller-supplied step executor. The executor
/// receives the assigned worker, the step, and the results so far.
pub fn run_role_workflow_with(
    goal: &Goal,
    roster: &[AgentHandle],
    log: &EventLog,
    executor: &mut dyn FnMut(&AgentHandle, &Step, &BTreeMap<String, String>) -> Result<String, String>,
) -> Result<(WorkflowResult, Plan), CoopError> {
    check_unique(roster)?;
    let planner = single_with_role(roster, ROLE_PLANNER)?;
    single_with_role(roster, ROLE_ASSIGNER)?;

    let request = ModelRequest::new(planner_prompt(goal), &planner.agent_id);
    let plan =
        generate_single_path(goal, &planner.gateway, &request, 1).map_err(|e| CoopError::Planning(e.to_string()))?;
    log.append(&planner.agent_id, kinds::WORKFLOW_PLAN, &plan);
    execute_with_roles(plan, roster, log, executor)
}

/// Assigns the steps of an existing plan to workers and runs them. Only the
/// assigner role is required.
pub fn execute_with_roles(
    mut plan: Plan,
    roster: &[AgentHandle],
    log: &EventLog,
    executor: &mut dyn FnMut(&AgentHandle, &Step, &BTreeMap<String, String>) -> Result<String, String>,
) -> Result<(WorkflowResult, Plan), CoopError> {
    check_unique(roster)?;
    let assigner = single_with_role(roster, ROLE_ASSIGNER)?;
    let creator = roster.iter().find(|a| a.has_role(ROLE_CREATOR));

    let mut workers: Vec<AgentHandle> = roster.iter().filter(|a| a.has_role(ROLE_WORKER)).cloned().collect();
    workers.sort_by(|a, b| a.agent_id.cmp(&b.agent_id));
    let mut result = WorkflowResult {
        plan_id: plan.plan_id.clone(),
        ..Default::default()
    };

    // Assignment happens up front so every step is covered before any runs.
    let mut assigned: Vec<usize> = Vec::with_capacity(plan.steps.len());
    for step in &plan.steps {
        let eligible = workers.iter().position(|w| match &step.required_capability {
            Some(cap) => w.capabilities.contains(cap),
            None => true,
        });
        let idx = match (eligible, &step.required_capability, creator) {
            (Some(i), _, _) => i,
            (None, Some(cap), Some(creator)) => {
                let agent_id = format!("spawned-{cap}");
                let spawned = AgentHandle::new(agent_id.clone(), creator.gateway.clone())
                    .with_roles([ROLE_WORKER])
                    .with_capabilities([cap.clone()]);
                log.append(&creator.agent_id, kinds::SPAWN, &json!({"agent_id": agent_id, "capability": cap}));
                result.spawned_agents.push(agent_id);
                workers.push(spawned);
                workers.len() - 1
            }
            _ => return Err(CoopError::NoCapableWorker(step.step_id.clone())),
        };
        let worker_id = workers[idx].agent_id.clone();
        log.append(
            &assigner.agent_id,
            kinds::ASSIGNMENT,
            &json!({"step_id": step.step_id, "agent_id": worker_id}),
        );
        result.assignments.insert(step.step_id.clone(), worker_id);
        assigned.push(idx);
    }

    for (i, idx) in assigned.into_iter().enumerate() {
        let worker = &workers[idx];
        plan.steps[i].status = StepStatus::InProgress;
        let step = plan.steps[i].clone();
        match executor(worker, &step, &result.step_results) {
            Ok(text) => {
                log.append(
                    &worker.agent_id,
                    kinds::STEP_RESULT,
                    &json!({"step_id": step.step_id, "status": "done", "result": text}),
                );
                plan.steps[i].status = StepStatus::Done;
                result.step_results.insert(step.step_id.clone(), text);
            }
            Err(reason) => {
                log.append(
                    &worker.agent_id,
                    kinds::STEP_RESULT,
                    &json!({"step_id": step.step_id, "status": "failed", "reason": reason}),
                );
                plan.steps[i].status = StepStatus::Failed;
                return Err(CoopError::StepFailed {
                    step_id: step.step_id,
                    reason,
                });
            }
        }
    }
    Ok((result, plan))
}

/// Rebuilds the most recent workflow in `records`.
pub fn replay_workflow(records: &[EventRecord]) -> Result<WorkflowResult, CoopError> {
    let start = records
        .iter()
        .rposition(|r| r.event_type == kinds::WORKFLOW_PLAN)
        .ok_or(CoopError::Replay("workflow"))?;
    let plan: Plan = serde_json::from_value(records[start].payload_value()).map_err(|_| CoopError::Replay("workflow"))?;
    let mut result = WorkflowResult {
        plan_id: plan.plan_id,
        ..Default::default()
    };
    let text = |v: &serde_json::Value, key: &str| v[key].as_str().map(String::from).ok_or(CoopError::Replay("workflow"));
    for r in &records[start + 1..] {
        let p = r.payload_value();
        match r.event_type.as_str() {
            kinds::SPAWN => result.spawned_agents.push(text(&p, "agent_id")?),
            kinds::ASSIGNMENT => {
                result.assignments.insert(text(&p, "step_id")?, text(&p, "agent_id")?);
            }
            kinds::STEP_RESULT if p["status"] == "done" => {
                result.step_results.insert(text(&p, "step_id")?, text(&p, "result")?);
            }
            kinds::WORKFLOW_PLAN => break,
            _ => {}
        }
    }
    Ok(result)
}
