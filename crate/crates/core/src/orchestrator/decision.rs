//! The pattern decision model.
//!
//! Each decision node offers options, and each option lists the quality
//! attributes it strengthens and the ones it trades off. A requirement tag
//! selects the options whose strengths include it.
//!
//! On an alternative node (pick exactly one) only the *distinguishing*
//! tags of an option pull toward it. Attributes both options share, such
//! as `interactivity` for the two goal creators, pull toward neither. When
//! the requirements pull one alternative both ways, the tag with the
//! higher rank wins. Assurance tags (certainty, safety, accessibility and
//! the like) outrank the efficiency class (`efficiency`, `cost_efficiency`,
//! `simplicity`, `limited_budget`). The losing tags are listed in the
//! report as overridden.
//!
//! On a complement node (any subset) every option whose strengths include
//! a required tag is switched on, on top of the baseline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::config::{
    BranchPolicy, CooperationKind, GoalCreatorKind, PatternConfig, PlannerKind, QueryingKind, ReflectorKind,
};
use super::OrchestratorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Alternative,
    Complement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionOption {
    /// The answer, which is also the pattern it selects.
    pub answer: String,
    pub strengths: BTreeSet<String>,
    pub tradeoffs: BTreeSet<String>,
    /// For alternatives, the tags that pull toward this option.
    pub selectors: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionNode {
    pub decision_id: String,
    pub question: String,
    pub relation: Relation,
    pub options: Vec<DecisionOption>,
    /// Baseline answers used when no requirement applies.
    pub baseline: BTreeSet<String>,
}

fn tags(list: &[&str]) -> BTreeSet<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn opt(answer: &str, strengths: &[&str], tradeoffs: &[&str]) -> DecisionOption {
    DecisionOption {
        answer: answer.to_string(),
        strengths: tags(strengths),
        tradeoffs: tags(tradeoffs),
        selectors: tags(strengths),
    }
}

fn alt(answer: &str, strengths: &[&str], tradeoffs: &[&str], selectors: &[&str]) -> DecisionOption {
    DecisionOption {
        selectors: tags(selectors),
        ..opt(answer, strengths, tradeoffs)
    }
}

fn node(id: &str, question: &str, relation: Relation, options: Vec<DecisionOption>, baseline: &[&str]) -> DecisionNode {
    DecisionNode {
        decision_id: id.to_string(),
        question: question.to_string(),
        relation,
        options,
        baseline: tags(baseline),
    }
}

/// The shipped decision graph, in pipeline order.
pub fn decision_graph() -> Vec<DecisionNode> {
    use Relation::*;
    vec![
        node(
            "goal_creation",
            "How does the agent obtain the user's goal?",
            Alternative,
            vec![
                alt(
                    "passive",
                    &["interactivity", "goal_seeking", "efficiency"],
                    &["reasoning_uncertainty"],
                    &["efficiency", "simplicity"],
                ),
                alt(
                    "proactive",
                    &["interactivity", "goal_seeking", "accessibility"],
                    &["overhead"],
                    &["accessibility", "supplementary_context"],
                ),
            ],
            &["passive"],
        ),
        node(
            "prompt_optimisation",
            "Are prompts and responses shaped by templates?",
            Complement,
            vec![opt(
                "optimiser",
                &["standardisation", "goal_alignment", "interoperability", "adaptability"],
                &["underspecification", "maintenance_overhead"],
            )],
            &["optimiser"],
        ),
        node(
            "knowledge_retrieval",
            "Does the agent consult an external knowledge base?",
            Complement,
            vec![opt(
                "rag",
                &["knowledge_retrieval", "updatability", "data_privacy", "cost_efficiency"],
                &["maintenance_overhead", "data_limitation"],
            )],
            &[],
        ),
        node(
            "model_querying",
            "Is the model queried once or step by step?",
            Alternative,
            vec![
                alt(
                    "one_shot",
                    &["efficiency", "cost_efficiency", "simplicity", "limited_budget"],
                    &["oversimplification", "lack_of_explainability", "context_window_size"],
                    &["efficiency", "cost_efficiency", "simplicity", "limited_budget"],
                ),
                alt(
                    "incremental",
                    &["supplementary_context", "reasoning_certainty", "explainability"],
                    &["overhead"],
                    &["supplementary_context", "reasoning_certainty", "explainability"],
                ),
            ],
            &["one_shot"],
        ),
        node(
            "plan_generation",
            "Does planning follow one path or explore several?",
            Alternative,
            vec![
                alt(
                    "single_path",
                    &["reasoning_certainty", "coherence", "efficiency"],
                    &["flexibility", "oversimplification"],
                    &["efficiency"],
                ),
                alt(
                    "multi_path",
                    &["reasoning_certainty", "coherence", "human_preference", "inclusiveness"],
                    &["overhead"],
                    &["human_preference", "inclusiveness"],
                ),
            ],
            &["single_path"],
        ),
        node(
            "reflection",
            "Who reviews the plan?",
            Complement,
            vec![
                opt(
                    "self",
                    &["reasoning_certainty", "explainability", "continuous_improvement", "efficiency"],
                    &["reasoning_uncertainty", "overhead"],
                ),
                opt(
                    "cross",
                    &["reasoning_certainty", "explainability", "inclusiveness", "scalability"],
                    &["reasoning_uncertainty", "fairness_preservation", "complex_accountability", "overhead"],
                ),
                opt(
                    "human",
                    &["human_preference", "contestability", "effectiveness"],
                    &["fairness_preservation", "limited_capability", "underspecification", "overhead"],
                ),
            ],
            &["self"],
        ),
        node(
            "cooperation",
            "How do multiple agents cooperate?",
            Complement,
            vec![
                opt("voting", &["fairness", "accountability", "collective_intelligence"], &["centralisation", "overhead"]),
                opt(
                    "role_based",
                    &["division_of_labor", "fault_tolerance", "scalability", "accountability"],
                    &["overhead"],
                ),
                opt(
                    "debate",
                    &["adaptability", "explainability", "critical_thinking"],
                    &["limited_capability", "data_privacy", "overhead", "scalability_preservation"],
                ),
            ],
            &[],
        ),
        node(
            "guardrails",
            "Are inputs and outputs screened?",
            Complement,
            vec![opt(
                "guardrails",
                &["robustness", "safety", "standard_alignment", "adaptability"],
                &["overhead", "lack_of_explainability"],
            )],
            &["guardrails"],
        ),
        node(
            "tool_registry",
            "Are tools discovered from a catalogue?",
            Complement,
            vec![opt(
                "registry",
                &["discoverability", "efficiency", "tool_appropriateness", "scalability"],
                &["centralisation", "overhead"],
            )],
            &["registry"],
        ),
        node(
            "tool_adapter",
            "Are tool interfaces learned and adapted?",
            Complement,
            vec![opt(
                "adapter",
                &["interoperability", "adaptability", "development_cost"],
                &["maintenance_overhead"],
            )],
            &["adapter"],
        ),
        node(
            "evaluation",
            "Is the agent evaluated against test suites?",
            Complement,
            vec![opt(
                "evaluator",
                &["functional_suitability", "adaptability", "flexibility"],
                &["metric_quantification", "quality_of_evaluation"],
            )],
            &[],
        ),
    ]
}

/// Tags that rank below every other tag when alternatives conflict.
pub const EFFICIENCY_CLASS: [&str; 4] = ["efficiency", "cost_efficiency", "simplicity", "limited_budget"];

/// Precedence rank of a tag; higher wins.
pub fn tag_rank(tag: &str) -> u8 {
    if EFFICIENCY_CLASS.contains(&tag) {
        0
    } else {
        1
    }
}

/// Every accepted requirement tag: the strengths and trade-offs of the
/// graph plus the alternative selectors.
pub fn vocabulary() -> BTreeSet<String> {
    let mut v = BTreeSet::new();
    for n in decision_graph() {
        for o in n.options {
            v.extend(o.strengths);
            v.extend(o.tradeoffs);
            v.extend(o.selectors);
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub decision_id: String,
    pub answer: String,
    /// `baseline` or `requirement`.
    pub reason: String,
    pub strengths_satisfied: BTreeSet<String>,
    pub tradeoffs_incurred: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Override {
    pub decision_id: String,
    pub tag: String,
    pub lost_to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DecisionReport {
    pub requirements: BTreeSet<String>,
    pub selections: Vec<Selection>,
    pub overridden: Vec<Override>,
    /// Required tags that no option lists as a strength.
    pub unmatched: Vec<String>,
    pub notes: Vec<String>,
}

fn resolve_alternative(
    node: &DecisionNode,
    requirements: &BTreeSet<String>,
    report: &mut DecisionReport,
) -> Result<(String, bool), OrchestratorError> {
    // Strongest pulling tag per option.
    let pulls: Vec<(usize, Vec<&String>)> = node
        .options
        .iter()
        .enumerate()
        .map(|(i, o)| (i, requirements.iter().filter(|t| o.selectors.contains(*t)).collect::<Vec<_>>()))
        .filter(|(_, ts)| !ts.is_empty())
        .collect();
    let winner = match pulls.as_slice() {
        [] => return Ok((node.baseline.iter().next().cloned().unwrap_or_default(), false)),
        [(i, _)] => *i,
        _ => {
            let best = |ts: &[&String]| ts.iter().map(|t| tag_rank(t)).max().unwrap_or(0);
            let top = pulls.iter().map(|(_, ts)| best(ts)).max().unwrap_or(0);
            let leaders: Vec<usize> = pulls.iter().filter(|(_, ts)| best(ts) == top).map(|(i, _)| *i).collect();
            if leaders.len() != 1 {
                return Err(OrchestratorError::ConflictUnresolvable {
                    decision_id: node.decision_id.clone(),
                    tags: pulls.iter().flat_map(|(_, ts)| ts.iter().map(|t| t.to_string())).collect(),
                });
            }
            let w = leaders[0];
            for (i, ts) in &pulls {
                if *i != w {
                    for t in ts {
                        report.overridden.push(Override {
                            decision_id: node.decision_id.clone(),
                            tag: t.to_string(),
                            lost_to: node.options[w].answer.clone(),
                        });
                    }
                }
            }
            w
        }
    };
    Ok((node.options[winner].answer.clone(), true))
}

/// Walks the decision graph for `requirements` and returns the resulting
/// config together with a report of every selection.
pub fn decide_patterns<S: AsRef<str>>(requirements: &[S]) -> Result<(PatternConfig, DecisionReport), OrchestratorError> {
    let vocab = vocabulary();
    let reqs: BTreeSet<String> = requirements.iter().map(|s| s.as_ref().trim().to_string()).collect();
    if let Some(unknown) = reqs.iter().find(|t| !vocab.contains(*t)) {
        return Err(OrchestratorError::UnknownRequirement(unknown.clone()));
    }
    let mut report = DecisionReport {
        requirements: reqs.clone(),
        ..Default::default()
    };
    let graph = decision_graph();
    let mut chosen: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();

    for n in &graph {
        let mut picks: Vec<(String, &'static str)> = Vec::new();
        match n.relation {
            Relation::Alternative => {
                let (answer, by_req) = resolve_alternative(n, &reqs, &mut report)?;
                picks.push((answer, if by_req { "requirement" } else { "baseline" }));
            }
            Relation::Complement => {
                for o in &n.options {
                    if o.strengths.iter().any(|s| reqs.contains(s)) {
                        picks.push((o.answer.clone(), "requirement"));
                    } else if n.baseline.contains(&o.answer) {
                        picks.push((o.answer.clone(), "baseline"));
                    }
                }
            }
        }
        for (answer, reason) in picks {
            let o = n.options.iter().find(|o| o.answer == answer).expect("answer belongs to node");
            report.selections.push(Selection {
                decision_id: n.decision_id.clone(),
                answer: answer.clone(),
                reason: reason.to_string(),
                strengths_satisfied: o.strengths.intersection(&reqs).cloned().collect(),
                tradeoffs_incurred: o.tradeoffs.clone(),
            });
            chosen.entry(n.decision_id.clone()).or_default().insert(answer);
        }
    }

    let strengths: BTreeSet<&String> = graph.iter().flat_map(|n| n.options.iter().flat_map(|o| o.strengths.iter())).collect();
    report.unmatched = reqs.iter().filter(|t| !strengths.contains(t)).cloned().collect();

    let has = |d: &str, a: &str| chosen.get(d).is_some_and(|s| s.contains(a));
    let mut config = PatternConfig::baseline();
    config.goal_creator = if has("goal_creation", "proactive") { GoalCreatorKind::Proactive } else { GoalCreatorKind::Passive };
    config.optimiser_enabled = has("prompt_optimisation", "optimiser");
    config.rag_enabled = has("knowledge_retrieval", "rag");
    config.querying = if has("model_querying", "incremental") { QueryingKind::Incremental } else { QueryingKind::OneShot };
    config.planner = if has("plan_generation", "multi_path") { PlannerKind::MultiPath } else { PlannerKind::SinglePath };
    config.reflectors.clear();
    for (a, k) in [("self", ReflectorKind::SelfReview), ("cross", ReflectorKind::Cross), ("human", ReflectorKind::Human)] {
        if has("reflection", a) {
            config.reflectors.insert(k);
        }
    }
    for (a, k) in [
        ("voting", CooperationKind::Voting),
        ("role_based", CooperationKind::RoleBased),
        ("debate", CooperationKind::Debate),
    ] {
        if has("cooperation", a) {
            config.cooperation.insert(k);
        }
    }
    config.guardrails_enabled = has("guardrails", "guardrails");
    config.registry_enabled = has("tool_registry", "registry");
    config.adapter_enabled = has("tool_adapter", "adapter") && config.registry_enabled;
    config.evaluator_enabled = has("evaluation", "evaluator");

    if config.planner == PlannerKind::MultiPath && !config.reflectors.contains(&ReflectorKind::Human) {
        let policy = if config.cooperation.contains(&CooperationKind::Voting) {
            BranchPolicy::Vote
        } else {
            BranchPolicy::First
        };
        config.planning.branch_policy = Some(policy);
        report.notes.push(format!(
            "multi_path without a human reviewer: branches are chosen by the {policy:?} policy"
        ));
    }
    Ok((config, report))
}
