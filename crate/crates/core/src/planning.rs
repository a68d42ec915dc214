//! Single-path and multi-path plan generation.
//!
//! Plans are serialised as enumerated lists, one step per line:
//! `N. description [capability]`, where the bracketed capability tag is
//! optional. Option lists for plan trees use the same grammar with an
//! optional ` -- rationale` suffix.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, ModelRequest, ModelSession, Purpose};
use crate::goal::Goal;
use crate::prompt::{optimise_response, OutputSpec, StructuredResponse, DEFAULT_ITEM_PATTERN};
use crate::text::{normalize, stable_seed};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("no sampled response parsed as a plan")]
    UnparseablePlan,
    #[error("options for node {0} did not parse")]
    UnparseableOptions(String),
    #[error("depth must be at least 1")]
    InvalidDepth,
    #[error("branching must be at least 1")]
    InvalidBranching,
    #[error("n_samples must be at least 1")]
    InvalidSamples,
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("{child} is not a child of {parent}")]
    NotAChild { parent: String, child: String },
    #[error("no choice made at depth {0}")]
    IncompleteChoices(usize),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    #[default]
    Pending,
    InProgress,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub step_id: String,
    pub description: String,
    #[serde(default)]
    pub depends_on: BTreeSet<String>,
    #[serde(default)]
    pub required_capability: Option<String>,
    #[serde(default)]
    pub status: StepStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    #[default]
    SinglePath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    #[default]
    Draft,
    Approved,
    Executing,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub plan_id: String,
    pub goal_id: String,
    pub steps: Vec<Step>,
    pub kind: PlanKind,
    pub status: PlanStatus,
}

/// A parsed plan line before it becomes a [`Step`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepSpec {
    pub description: String,
    pub capability: Option<String>,
}

impl StepSpec {
    pub fn new(description: &str, capability: Option<&str>) -> Self {
        Self {
            description: description.to_string(),
            capability: capability.map(String::from),
        }
    }

    fn normalized(&self) -> String {
        match &self.capability {
            Some(c) => format!("{} [{}]", normalize(&self.description), normalize(c)),
            None => normalize(&self.description),
        }
    }
}

impl Plan {
    /// A chained plan: each step depends on its predecessor.
    pub fn linear(plan_id: impl Into<String>, goal_id: impl Into<String>, specs: &[StepSpec]) -> Self {
        let steps = specs
            .iter()
            .enumerate()
            .map(|(i, s)| Step {
                step_id: format!("s{}", i + 1),
                description: s.description.clone(),
                depends_on: if i == 0 {
                    BTreeSet::new()
                } else {
                    BTreeSet::from([format!("s{i}")])
                },
                required_capability: s.capability.clone(),
                status: StepStatus::Pending,
            })
            .collect();
        Self {
            plan_id: plan_id.into(),
            goal_id: goal_id.into(),
            steps,
            kind: PlanKind::SinglePath,
            status: PlanStatus::Draft,
        }
    }

    pub fn specs(&self) -> Vec<StepSpec> {
        self.steps
            .iter()
            .map(|s| StepSpec {
                description: s.description.clone(),
                capability: s.required_capability.clone(),
            })
            .collect()
    }

    /// Digest of the step structure (ids, text, dependencies, capabilities);
    /// statuses are excluded so approving a plan keeps its digest.
    pub fn digest(&self) -> String {
        let shape: Vec<_> = self
            .steps
            .iter()
            .map(|s| (&s.step_id, &s.description, &s.depends_on, &s.required_capability))
            .collect();
        let bytes = serde_json::to_vec(&shape).expect("plan serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// The enumerated-list form that `parse_plan_text` reads back.
    pub fn render(&self) -> String {
        render_specs(&self.specs())
    }

    pub fn step(&self, step_id: &str) -> Option<&Step> {
        self.steps.iter().find(|s| s.step_id == step_id)
    }
}

pub fn render_specs(specs: &[StepSpec]) -> String {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| match &s.capability {
            Some(c) => format!("{}. {} [{}]", i + 1, s.description, c),
            None => format!("{}. {}", i + 1, s.description),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn strip_enumerator(line: &str) -> &str {
    let trimmed = line.trim();
    let digits = trimmed.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 && trimmed[digits..].starts_with('.') {
        trimmed[digits + 1..].trim()
    } else {
        trimmed
    }
}

/// Parses one step line (with or without its `N.` prefix).
pub fn parse_step_line(line: &str) -> Option<StepSpec> {
    let body = strip_enumerator(line);
    let (description, capability) = match body.strip_suffix(']').and_then(|b| b.rsplit_once('[')) {
        Some((desc, cap)) if !cap.trim().is_empty() && !cap.contains(char::is_whitespace) => {
            (desc.trim(), Some(cap.trim().to_string()))
        }
        _ => (body, None),
    };
    if description.is_empty() {
        return None;
    }
    Some(StepSpec {
        description: description.to_string(),
        capability,
    })
}

/// Strict enumerated-list parse of a plan response.
pub fn parse_plan_text(raw: &str) -> Result<Vec<StepSpec>, PlanError> {
    let spec = OutputSpec::enumerated("plan", DEFAULT_ITEM_PATTERN);
    match optimise_response(raw, &spec) {
        Ok(StructuredResponse::EnumeratedList(items)) => items
            .iter()
            .map(|i| parse_step_line(i))
            .collect::<Option<Vec<_>>>()
            .ok_or(PlanError::UnparseablePlan),
        _ => Err(PlanError::UnparseablePlan),
    }
}

/// Normalised form used to group equivalent samples.
pub fn normalize_specs(specs: &[StepSpec]) -> Vec<String> {
    specs.iter().map(StepSpec::normalized).collect()
}

/// Index of the modal sample among `parses` (unparseable samples are
/// `None`). Ties go to the group whose first member has the lowest index.
pub fn select_modal<T: Eq + std::hash::Hash>(parses: &[Option<T>]) -> Option<usize> {
    let mut groups: HashMap<&T, (usize, usize)> = HashMap::new();
    for (idx, p) in parses.iter().enumerate() {
        if let Some(p) = p {
            groups.entry(p).or_insert((idx, 0)).1 += 1;
        }
    }
    groups
        .into_values()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .map(|(first, _)| first)
}

/// Self-consistent single-path planning over `n_samples` one-shot queries
/// seeded `request.seed`, `request.seed + 1`, and so on.
pub fn generate_single_path(
    goal: &Goal,
    gateway: &Gateway,
    request: &ModelRequest,
    n_samples: usize,
) -> Result<Plan, PlanError> {
    if n_samples == 0 {
        return Err(PlanError::InvalidSamples);
    }
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples as u64 {
        let req = request.clone().with_seed(request.seed.wrapping_add(i)).with_purpose(Purpose::Plan);
        let response = gateway.one_shot_query(&req)?;
        samples.push(parse_plan_text(&response.text).ok());
    }
    let keys: Vec<Option<Vec<String>>> = samples
        .iter()
        .map(|s| s.as_ref().map(|specs| normalize_specs(specs)))
        .collect();
    let chosen = select_modal(&keys).ok_or(PlanError::UnparseablePlan)?;
    let specs = samples[chosen].clone().expect("modal sample parsed");
    Ok(Plan::linear(format!("{}-plan", goal.goal_id), &goal.goal_id, &specs))
}

/// Step-by-step planning: one incremental query per step until the model
/// answers `DONE` or `max_steps` is reached. Query `i` uses seed `i`.
pub fn generate_single_path_incremental(
    goal: &Goal,
    gateway: &Gateway,
    session: &mut ModelSession,
    max_steps: usize,
) -> Result<Plan, PlanError> {
    let mut specs: Vec<StepSpec> = Vec::new();
    for i in 0..max_steps {
        session.seed = i as u64;
        let increment = format!("NEXT STEP {} for: {}", i + 1, goal.description);
        let response = gateway.incremental_query(session, &increment)?;
        let text = response.text.trim();
        if normalize(text) == "done" {
            break;
        }
        let first_line = text.lines().next().unwrap_or_default();
        specs.push(parse_step_line(first_line).ok_or(PlanError::UnparseablePlan)?);
    }
    if specs.is_empty() {
        return Err(PlanError::UnparseablePlan);
    }
    Ok(Plan::linear(format!("{}-plan", goal.goal_id), &goal.goal_id, &specs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOption {
    pub option_id: String,
    pub description: String,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub node_id: String,
    pub option: StepOption,
    pub parent: Option<String>,
    pub children: Vec<String>,
    pub chosen: bool,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanTree {
    pub tree_id: String,
    pub goal_id: String,
    pub root: String,
    pub nodes: BTreeMap<String, TreeNode>,
    pub depth: usize,
    pub branching: usize,
}

fn parse_options(raw: &str, limit: usize) -> Option<Vec<(String, String)>> {
    let spec = OutputSpec::enumerated("options", DEFAULT_ITEM_PATTERN);
    let StructuredResponse::EnumeratedList(items) = optimise_response(raw, &spec).ok()? else {
        return None;
    };
    let parsed: Vec<_> = items
        .iter()
        .take(limit)
        .map(|item| {
            let body = strip_enumerator(item);
            match body.split_once(" -- ") {
                Some((d, r)) => (d.trim().to_string(), r.trim().to_string()),
                None => (body.to_string(), String::new()),
            }
        })
        .filter(|(d, _)| !d.is_empty())
        .collect();
    (!parsed.is_empty()).then_some(parsed)
}

/// Breadth-first option tree. Every frontier node is expanded exactly once
/// with an incremental query seeded by the node's path id.
pub fn generate_multi_path(
    goal: &Goal,
    gateway: &Gateway,
    session: &mut ModelSession,
    depth: usize,
    branching: usize,
) -> Result<PlanTree, PlanError> {
    if depth == 0 {
        return Err(PlanError::InvalidDepth);
    }
    if branching == 0 {
        return Err(PlanError::InvalidBranching);
    }
    let root_id = "n0".to_string();
    let mut nodes = BTreeMap::new();
    nodes.insert(
        root_id.clone(),
        TreeNode {
            node_id: root_id.clone(),
            option: StepOption {
                option_id: root_id.clone(),
                description: goal.description.clone(),
                rationale: String::new(),
            },
            parent: None,
            children: Vec::new(),
            chosen: false,
            depth: 0,
        },
    );
    let mut tree = PlanTree {
        tree_id: format!("{}-tree", goal.goal_id),
        goal_id: goal.goal_id.clone(),
        root: root_id.clone(),
        nodes,
        depth,
        branching,
    };
    let mut frontier = VecDeque::from([root_id]);
    while let Some(node_id) = frontier.pop_front() {
        let node_depth = tree.nodes[&node_id].depth;
        if node_depth >= depth {
            continue;
        }
        let path = tree
            .path_to(&node_id)
            .iter()
            .map(|id| tree.nodes[id].option.description.clone())
            .collect::<Vec<_>>()
            .join(" > ");
        session.seed = stable_seed(&node_id);
        let increment = format!("OPTIONS {branching} for: {path}");
        let response = gateway.incremental_query(session, &increment)?;
        let options =
            parse_options(&response.text, branching).ok_or_else(|| PlanError::UnparseableOptions(node_id.clone()))?;
        for (i, (description, rationale)) in options.into_iter().enumerate() {
            let child_id = format!("{node_id}.{}", i + 1);
            tree.nodes.insert(
                child_id.clone(),
                TreeNode {
                    node_id: child_id.clone(),
                    option: StepOption {
                        option_id: child_id.clone(),
                        description,
                        rationale,
                    },
                    parent: Some(node_id.clone()),
                    children: Vec::new(),
                    chosen: false,
                    depth: node_depth + 1,
                },
            );
            tree.nodes.get_mut(&node_id).expect("parent exists").children.push(child_id.clone());
            frontier.push_back(child_id);
        }
    }
    Ok(tree)
}

impl PlanTree {
    /// Node ids from the root's first child down to `node_id`.
    fn path_to(&self, node_id: &str) -> Vec<String> {
        let mut path = Vec::new();
        let mut cur = Some(node_id.to_string());
        while let Some(id) = cur {
            let node = &self.nodes[&id];
            path.push(id.clone());
            cur = node.parent.clone();
        }
        path.reverse();
        path
    }

    pub fn leaves(&self) -> usize {
        self.nodes.values().filter(|n| n.children.is_empty()).count()
    }

    pub fn children(&self, node_id: &str) -> &[String] {
        self.nodes.get(node_id).map(|n| n.children.as_slice()).unwrap_or(&[])
    }

    /// Marks `option_node_id` chosen, clearing any chosen sibling.
    pub fn select_branch(&mut self, node_id: &str, option_node_id: &str) -> Result<(), PlanError> {
        let parent = self
            .nodes
            .get(node_id)
            .ok_or_else(|| PlanError::UnknownNode(node_id.to_string()))?;
        if !self.nodes.contains_key(option_node_id) {
            return Err(PlanError::UnknownNode(option_node_id.to_string()));
        }
        if !parent.children.iter().any(|c| c == option_node_id) {
            return Err(PlanError::NotAChild {
                parent: node_id.to_string(),
                child: option_node_id.to_string(),
            });
        }
        for sibling in parent.children.clone() {
            let chosen = sibling == option_node_id;
            self.nodes.get_mut(&sibling).expect("child exists").chosen = chosen;
        }
        Ok(())
    }

    /// The first node along the chosen path that still needs a choice.
    pub fn next_pending_choice(&self) -> Option<String> {
        let mut cur = self.root.clone();
        loop {
            let node = &self.nodes[&cur];
            if node.children.is_empty() {
                return None;
            }
            if node.children.len() == 1 {
                cur = node.children[0].clone();
                continue;
            }
            match node.children.iter().find(|c| self.nodes[*c].chosen) {
                Some(c) => cur = c.clone(),
                None => return Some(cur),
            }
        }
    }

    /// Flattens the chosen root-to-leaf path into a single-path plan. Nodes
    /// with a single child need no explicit choice.
    pub fn linearize(&self) -> Result<Plan, PlanError> {
        let mut specs = Vec::new();
        let mut cur = self.root.clone();
        loop {
            let node = &self.nodes[&cur];
            if node.children.is_empty() {
                break;
            }
            let next = if node.children.len() == 1 {
                node.children[0].clone()
            } else {
                node.children
                    .iter()
                    .find(|c| self.nodes[*c].chosen)
                    .cloned()
                    .ok_or(PlanError::IncompleteChoices(node.depth + 1))?
            };
            let option = &self.nodes[&next].option;
            specs.push(
                parse_step_line(&option.description)
                    .unwrap_or_else(|| StepSpec::new(&option.description, None)),
            );
            cur = next;
        }
        Ok(Plan::linear(format!("{}-plan", self.goal_id), &self.goal_id, &specs))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    DuplicateId { step_id: String },
    MissingDependency { step_id: String, missing: String },
    SelfDependency { step_id: String },
    Cycle { step_ids: Vec<String> },
    ChainLaw { reason: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::DuplicateId { step_id } => write!(f, "duplicate id {step_id}"),
            Violation::MissingDependency { step_id, missing } => {
                write!(f, "{step_id} depends on missing {missing}")
            }
            Violation::SelfDependency { step_id } => write!(f, "self-dependency on {step_id}"),
            Violation::Cycle { step_ids } => write!(f, "cycle through {}", step_ids.join(", ")),
            Violation::ChainLaw { reason } => write!(f, "chain law: {reason}"),
        }
    }
}

/// Structural checks: unique ids, existing dependencies, no self edges,
/// acyclicity, and the single-path chain law.
pub fn validate_plan(plan: &Plan) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    for s in &plan.steps {
        if !seen.insert(s.step_id.as_str()) {
            violations.push(Violation::DuplicateId { step_id: s.step_id.clone() });
        }
    }
    for s in &plan.steps {
        for d in &s.depends_on {
            if d == &s.step_id {
                violations.push(Violation::SelfDependency { step_id: s.step_id.clone() });
            } else if !seen.contains(d.as_str()) {
                violations.push(Violation::MissingDependency {
                    step_id: s.step_id.clone(),
                    missing: d.clone(),
                });
            }
        }
    }

    // Kahn's algorithm over known, non-self edges.
    let ids: BTreeSet<&str> = seen.clone();
    let mut indegree: BTreeMap<&str, usize> = ids.iter().map(|id| (*id, 0)).collect();
    let mut dependents: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for s in &plan.steps {
        for d in &s.depends_on {
            if d != &s.step_id && ids.contains(d.as_str()) {
                *indegree.get_mut(s.step_id.as_str()).expect("known id") += 1;
                dependents.entry(d.as_str()).or_default().push(s.step_id.as_str());
            }
        }
    }
    let mut queue: VecDeque<&str> = indegree.iter().filter(|(_, n)| **n == 0).map(|(id, _)| *id).collect();
    let mut visited = 0;
    while let Some(id) = queue.pop_front() {
        visited += 1;
        for dep in dependents.get(id).cloned().unwrap_or_default() {
            let n = indegree.get_mut(dep).expect("known id");
            *n -= 1;
            if *n == 0 {
                queue.push_back(dep);
            }
        }
    }
    if visited < indegree.len() {
        let stuck = indegree.iter().filter(|(_, n)| **n > 0).map(|(id, _)| id.to_string()).collect();
        violations.push(Violation::Cycle { step_ids: stuck });
    }

    if plan.kind == PlanKind::SinglePath {
        for (i, s) in plan.steps.iter().enumerate() {
            let expected: BTreeSet<String> = if i == 0 {
                BTreeSet::new()
            } else {
                BTreeSet::from([plan.steps[i - 1].step_id.clone()])
            };
            if s.depends_on != expected {
                violations.push(Violation::ChainLaw {
                    reason: format!("{} must depend exactly on its predecessor", s.step_id),
                });
            }
        }
        let mut successor_count: HashMap<&str, usize> = HashMap::new();
        for s in &plan.steps {
            for d in &s.depends_on {
                *successor_count.entry(d.as_str()).or_default() += 1;
            }
        }
        let terminals = plan
            .steps
            .iter()
            .filter(|s| successor_count.get(s.step_id.as_str()).copied().unwrap_or(0) == 0)
            .count();
        if !plan.steps.is_empty() && terminals != 1 {
            violations.push(Violation::ChainLaw {
                reason: format!("{terminals} terminal steps"),
            });
        }
        if let Some((id, _)) = successor_count.iter().find(|(_, n)| **n > 1) {
            violations.push(Violation::ChainLaw {
                reason: format!("{id} has more than one successor"),
            });
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}
