//! Debate-based cooperation with a round barrier.
//!
//! Round 0 collects initial answers. In each later round every agent sees
//! the other agents' latest statements and answers again. Statements within
//! a round are ordered by `agent_id`, and the debate stops as soon as all
//! statements of a round agree after normalisation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{check_unique, AgentHandle, CoopError};
use crate::audit::{kinds, EventLog, EventRecord};
use crate::gateway::{ModelRequest, Purpose};
use crate::text::normalize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub agent_id: String,
    pub statement: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebateTermination {
    Consensus,
    RoundLimit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebateTranscript {
    pub question: String,
    pub rounds: Vec<Vec<Statement>>,
    pub consensus: Option<String>,
    pub terminated_by: DebateTermination,
}

/// True iff every statement normalises to the same text. Vacuously true for
/// zero or one statement.
pub fn detect_consensus<S: AsRef<str>>(statements: &[S]) -> bool {
    let mut normalised = statements.iter().map(|s| normalize(s.as_ref()));
    match normalised.next() {
        Some(first) => normalised.all(|s| s == first),
        None => true,
    }
}

pub fn debate_prompt(question: &str, round: usize, others: &[&Statement]) -> String {
    if round == 0 {
        return format!("DEBATE round 0: {question}");
    }
    let others = others
        .iter()
        .map(|s| format!("{}: {}", s.agent_id, s.statement))
        .collect::<Vec<_>>()
        .join("\n");
    format!("DEBATE round {round}: {question}\nOTHERS:\n{others}")
}

pub fn run_debate(question: &str, agents: &[AgentHandle], max_rounds: usize, log: &EventLog) -> Result<DebateTranscript, CoopError> {
    if agents.len() < 2 {
        return Err(CoopError::TooFew {
            what: "debaters",
            min: 2,
            got: agents.len(),
        });
    }
    if max_rounds == 0 {
        return Err(CoopError::InvalidRounds);
    }
    check_unique(agents)?;
    let mut agents: Vec<&AgentHandle> = agents.iter().collect();
    agents.sort_by(|a, b| a.agent_id.cmp(&b.agent_id));
    log.append(
        super::vote::COORDINATOR,
        kinds::DEBATE_OPENED,
        &json!({"question": question, "max_rounds": max_rounds,
                "agents": agents.iter().map(|a| a.agent_id.as_str()).collect::<Vec<_>>()}),
    );

    let mut rounds: Vec<Vec<Statement>> = Vec::new();
    let mut consensus = None;
    for round in 0..max_rounds {
        let previous = rounds.last();
        let prompts: Vec<String> = agents
            .iter()
            .map(|a| {
                let others: Vec<&Statement> = previous
                    .map(|p| p.iter().filter(|s| s.agent_id != a.agent_id).collect())
                    .unwrap_or_default();
                debate_prompt(question, round, &others)
            })
            .collect();
        // Queried in id order so instrumented gateways log deterministically.
        let answers: Vec<_> = agents
            .iter()
            .zip(&prompts)
            .map(|(a, prompt)| {
                let request = ModelRequest::new(prompt.clone(), &a.agent_id)
                    .with_seed(round as u64)
                    .with_purpose(Purpose::Debate);
                a.gateway.one_shot_query(&request)
            })
            .collect();
        let mut statements = Vec::with_capacity(agents.len());
        for (a, answer) in agents.iter().zip(answers) {
            let text = answer
                .map_err(|source| CoopError::AgentFailed {
                    agent_id: a.agent_id.clone(),
                    round,
                    source,
                })?
                .text
                .trim()
                .to_string();
            log.append(&a.agent_id, kinds::DEBATE_STATEMENT, &json!({"round": round, "statement": text}));
            statements.push(Statement {
                agent_id: a.agent_id.clone(),
                statement: text,
            });
        }
        let agreed = detect_consensus(&statements.iter().map(|s| s.statement.as_str()).collect::<Vec<_>>());
        if agreed {
            consensus = Some(normalize(&statements[0].statement));
        }
        rounds.push(statements);
        if agreed {
            break;
        }
    }
    let transcript = DebateTranscript {
        question: question.to_string(),
        rounds,
        terminated_by: if consensus.is_some() {
            DebateTermination::Consensus
        } else {
            DebateTermination::RoundLimit
        },
        consensus,
    };
    log.append(
        super::vote::COORDINATOR,
        kinds::DEBATE_RESULT,
        &json!({"rounds": transcript.rounds.len(), "consensus": transcript.consensus,
                "terminated_by": transcript.terminated_by}),
    );
    Ok(transcript)
}

/// Rebuilds the most recent debate transcript in `records`.
pub fn replay_debate(records: &[EventRecord]) -> Result<DebateTranscript, CoopError> {
    let bad = || CoopError::Replay("debate");
    let start = records
        .iter()
        .rposition(|r| r.event_type == kinds::DEBATE_OPENED)
        .ok_or_else(bad)?;
    let question = records[start].payload_value()["question"]
        .as_str()
        .ok_or_else(bad)?
        .to_string();
    let mut by_round: BTreeMap<u64, Vec<Statement>> = BTreeMap::new();
    let mut finished = false;
    for r in &records[start + 1..] {
        match r.event_type.as_str() {
            kinds::DEBATE_STATEMENT => {
                let p = r.payload_value();
                by_round.entry(p["round"].as_u64().ok_or_else(bad)?).or_default().push(Statement {
                    agent_id: r.actor_id.clone(),
                    statement: p["statement"].as_str().ok_or_else(bad)?.to_string(),
                });
            }
            kinds::DEBATE_RESULT => {
                finished = true;
                break;
            }
            _ => {}
        }
    }
    if !finished {
        return Err(bad());
    }
    let rounds: Vec<Vec<Statement>> = by_round.into_values().collect();
    let consensus = rounds
        .last()
        .filter(|last| detect_consensus(&last.iter().map(|s| s.statement.as_str()).collect::<Vec<_>>()))
        .map(|last| normalize(&last[0].statement));
    Ok(DebateTranscript {
        question,
        rounds,
        terminated_by: if consensus.is_some() {
            DebateTermination::Consensus
        } else {
            DebateTermination::RoundLimit
        },
        consensus,
    })
}
