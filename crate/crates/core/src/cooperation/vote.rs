//! Voting-based cooperation.
//!
//! Voters answer `VOTE` prompts with one candidate id (optionally prefixed
//! by `vote:`), or `SCORE` prompts with one `candidate: score` line per
//! candidate, scores in `[0, 10]`. Anything else is an abstention.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{check_unique, AgentHandle, CoopError};
use crate::audit::{kinds, EventLog, EventRecord};
use crate::gateway::{ModelRequest, Purpose};
use crate::prompt::{optimise_response, OutputSpec, StructuredResponse};
use crate::text::normalize;

/// Relative tolerance under which two tallies count as tied.
pub const TIE_EPSILON: f64 = 1e-9;

pub const COORDINATOR: &str = "coordinator";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMethod {
    HeadCount,
    Weighted,
    AverageScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ballot {
    pub voter_id: String,
    pub choice_id: String,
    pub weight_applied: f64,
    /// Per-candidate scores; only filled for average-score votes.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scores: BTreeMap<String, f64>,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    pub method: VoteMethod,
    pub tally: BTreeMap<String, f64>,
    pub winner: String,
    pub tied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub result: VoteResult,
    pub ballots: Vec<Ballot>,
    /// Voters whose answer named no candidate; the vote went on without them.
    pub abstained: Vec<String>,
}

/// Counts `ballots` over `candidates`. The winner is the lexicographically
/// smallest candidate whose tally is within [`TIE_EPSILON`] (relative) of
/// the maximum.
pub fn tally(method: VoteMethod, candidates: &[String], ballots: &[Ballot]) -> Result<VoteResult, CoopError> {
    if ballots.is_empty() {
        return Err(CoopError::AllAbstained);
    }
    let mut totals: BTreeMap<String, f64> = candidates.iter().map(|c| (c.clone(), 0.0)).collect();
    match method {
        VoteMethod::HeadCount | VoteMethod::Weighted => {
            for b in ballots {
                let w = if method == VoteMethod::HeadCount { 1.0 } else { b.weight_applied };
                *totals.entry(b.choice_id.clone()).or_default() += w;
            }
        }
        VoteMethod::AverageScore => {
            for total in totals.values_mut() {
                *total = 0.0;
            }
            for b in ballots {
                for (c, s) in &b.scores {
                    *totals.entry(c.clone()).or_default() += s;
                }
            }
            let n = ballots.len() as f64;
            totals.values_mut().for_each(|t| *t /= n);
        }
    }
    let max = totals.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let close = |t: f64| max - t <= TIE_EPSILON * max.abs();
    let maximisers: Vec<&String> = totals.iter().filter(|(_, t)| close(**t)).map(|(c, _)| c).collect();
    Ok(VoteResult {
        method,
        winner: maximisers[0].clone(),
        tied: maximisers.len() > 1,
        tally: totals,
    })
}

fn candidate_list(candidates: &[String]) -> String {
    candidates.join(", ")
}

pub fn vote_prompt(question: &str, candidates: &[String], method: VoteMethod) -> String {
    let verb = if method == VoteMethod::AverageScore { "SCORE" } else { "VOTE" };
    format!("{verb}: {question}\nCANDIDATES: {}", candidate_list(candidates))
}

fn match_candidate(answer: &str, candidates: &[String]) -> Option<String> {
    let answer = answer.trim();
    let answer = match answer.split_once(':') {
        Some((k, v)) if k.trim().eq_ignore_ascii_case("vote") => v,
        _ => answer,
    };
    let wanted = normalize(answer);
    candidates.iter().find(|c| normalize(c) == wanted).cloned()
}

fn parse_scores(answer: &str, candidates: &[String]) -> Option<BTreeMap<String, f64>> {
    let spec = OutputSpec::key_value("scores", candidates.iter().cloned());
    let StructuredResponse::KeyValue(map) = optimise_response(answer, &spec).ok()? else {
        return None;
    };
    let mut scores = BTreeMap::new();
    for c in candidates {
        let s: f64 = map[c].parse().ok()?;
        if !(0.0..=10.0).contains(&s) {
            return None;
        }
        scores.insert(c.clone(), s);
    }
    Some(scores)
}

/// Queries every voter once (seeded with `seed`) and tallies the ballots.
pub fn run_vote(
    question: &str,
    candidates: &[String],
    voters: &[AgentHandle],
    method: VoteMethod,
    seed: u64,
    log: &EventLog,
) -> Result<VoteOutcome, CoopError> {
    if candidates.len() < 2 {
        return Err(CoopError::TooFew {
            what: "candidates",
            min: 2,
            got: candidates.len(),
        });
    }
    if voters.is_empty() {
        return Err(CoopError::TooFew {
            what: "voters",
            min: 1,
            got: 0,
        });
    }
    check_unique(voters)?;
    log.append(
        COORDINATOR,
        kinds::VOTE_OPENED,
        &json!({"question": question, "candidates": candidates, "method": method}),
    );
    let prompt = vote_prompt(question, candidates, method);
    let mut ballots = Vec::new();
    let mut abstained = Vec::new();
    for voter in voters {
        let request = ModelRequest::new(prompt.clone(), &voter.agent_id)
            .with_seed(seed)
            .with_purpose(Purpose::Other);
        let answer = voter.gateway.one_shot_query(&request).map(|r| r.text);
        let parsed = match (&answer, method) {
            (Ok(text), VoteMethod::AverageScore) => parse_scores(text, candidates).map(|scores| {
                let best = scores
                    .iter()
                    .fold(None::<(&String, f64)>, |acc, (c, s)| match acc {
                        Some((_, bs)) if bs >= *s => acc,
                        _ => Some((c, *s)),
                    })
                    .map(|(c, _)| c.clone())
                    .expect("at least two candidates");
                (best, scores)
            }),
            (Ok(text), _) => match_candidate(text, candidates).map(|c| (c, BTreeMap::new())),
            (Err(_), _) => None,
        };
        match parsed {
            Some((choice_id, scores)) => {
                let weight_applied = if method == VoteMethod::Weighted { voter.weight } else { 1.0 };
                let mut payload = json!({"choice_id": choice_id, "weight_applied": weight_applied});
                if !scores.is_empty() {
                    payload["scores"] = json!(scores);
                }
                let rec = log.append(&voter.agent_id, kinds::BALLOT, &payload);
                ballots.push(Ballot {
                    voter_id: voter.agent_id.clone(),
                    choice_id,
                    weight_applied,
                    scores,
                    seq: rec.seq,
                });
            }
            None => {
                let reason = match answer {
                    Ok(text) => format!("answer {:?} names no candidate", text.trim()),
                    Err(e) => e.to_string(),
                };
                log.append(&voter.agent_id, kinds::ABSTENTION, &json!({"reason": reason}));
                abstained.push(voter.agent_id.clone());
            }
        }
    }
    let result = match tally(method, candidates, &ballots) {
        Ok(r) => r,
        Err(e) => {
            log.append(COORDINATOR, kinds::VOTE_RESULT, &json!({"error": e.to_string()}));
            return Err(e);
        }
    };
    log.append(COORDINATOR, kinds::VOTE_RESULT, &result);
    Ok(VoteOutcome {
        result,
        ballots,
        abstained,
    })
}

/// Rebuilds the most recent vote in `records` from its opening event and
/// ballots.
pub fn replay_vote(records: &[EventRecord]) -> Result<VoteResult, CoopError> {
    let start = records
        .iter()
        .rposition(|r| r.event_type == kinds::VOTE_OPENED)
        .ok_or(CoopError::Replay("vote"))?;
    let opened = records[start].payload_value();
    let candidates: Vec<String> =
        serde_json::from_value(opened["candidates"].clone()).map_err(|_| CoopError::Replay("vote"))?;
    let method: VoteMethod = serde_json::from_value(opened["method"].clone()).map_err(|_| CoopError::Replay("vote"))?;
    let mut ballots = Vec::new();
    for r in &records[start + 1..] {
        if r.event_type == kinds::VOTE_RESULT {
            break;
        }
        if r.event_type != kinds::BALLOT {
            continue;
        }
        let p = r.payload_value();
        ballots.push(Ballot {
            voter_id: r.actor_id.clone(),
            choice_id: p["choice_id"].as_str().ok_or(CoopError::Replay("vote"))?.to_string(),
            weight_applied: p["weight_applied"].as_f64().ok_or(CoopError::Replay("vote"))?,
            scores: serde_json::from_value(p.get("scores").cloned().unwrap_or(json!({})))
                .map_err(|_| CoopError::Replay("vote"))?,
            seq: r.seq,
        });
    }
    tally(method, &candidates, &ballots)
}
