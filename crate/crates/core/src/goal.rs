//! Passive and proactive goal creation.
//!
//! Constraint markers: a token of the form `word:` followed by a value
//! token is a constraint, scanned left to right; the remaining tokens form
//! the description. When markers consume the whole utterance the
//! description is the full utterance text.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::KnowledgeBase;
use crate::text::is_identifier;

pub const DEFAULT_PROACTIVE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum GoalError {
    #[error("empty utterance")]
    EmptyUtterance,
    #[error("no utterance and no detector event above threshold")]
    NoSignal,
    #[error("detector event {detector_id} has confidence {confidence} outside [0, 1]")]
    InvalidConfidence { detector_id: String, confidence: f64 },
    #[error("detector file line {line}: {message}")]
    DetectorFile { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Passive,
    Proactive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    User,
    Memory,
    Detector,
    Rag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Text,
    ImageDescriptor,
    UiLayout,
    Gesture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextItem {
    pub source: ContextSource,
    pub modality: Modality,
    pub content: String,
    /// Meaningful for detector items only; 1 for everything else.
    pub confidence: f64,
    pub timestamp: u64,
    /// Originating document or detector id, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub goal_id: String,
    pub description: String,
    pub constraints: BTreeMap<String, String>,
    pub context: Vec<ContextItem>,
    pub origin: Origin,
    pub created_seq: u64,
}

impl Goal {
    pub fn has_detector_context(&self) -> bool {
        self.context.iter().any(|c| c.source == ContextSource::Detector)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorEvent {
    pub detector_id: String,
    #[serde(default)]
    pub modality: Modality,
    pub payload: String,
    pub confidence: f64,
}

impl DetectorEvent {
    pub fn new(detector_id: &str, modality: Modality, payload: &str, confidence: f64) -> Self {
        Self {
            detector_id: detector_id.into(),
            modality,
            payload: payload.into(),
            confidence,
        }
    }
}

/// Tells the user which detectors contributed context.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Notification {
    pub captured: Vec<String>,
}

/// Splits an utterance into description and `key: value` constraints.
pub fn parse_constraints(utterance: &str) -> (String, BTreeMap<String, String>) {
    let tokens: Vec<&str> = utterance.split_whitespace().collect();
    let mut constraints = BTreeMap::new();
    let mut rest = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let tok = tokens[i];
        let key = tok.strip_suffix(':').filter(|k| is_identifier(k));
        match (key, tokens.get(i + 1)) {
            (Some(k), Some(value)) => {
                constraints.insert(k.to_string(), value.to_string());
                i += 2;
            }
            _ => {
                rest.push(tok);
                i += 1;
            }
        }
    }
    let description = if rest.is_empty() {
        tokens.join(" ")
    } else {
        rest.join(" ")
    };
    (description, constraints)
}

/// Up to `k` documents, newest first; equal sequence numbers order by id.
pub fn retrieve_recent_context(memory: &KnowledgeBase, k: usize) -> Vec<ContextItem> {
    let mut docs: Vec<_> = memory.documents().collect();
    docs.sort_by(|a, b| b.seq.cmp(&a.seq).then_with(|| a.doc_id.cmp(&b.doc_id)));
    docs.into_iter()
        .take(k)
        .map(|d| ContextItem {
            source: ContextSource::Memory,
            modality: Modality::Text,
            content: d.text.clone(),
            confidence: 1.0,
            timestamp: d.seq,
            ref_id: Some(d.doc_id.clone()),
        })
        .collect()
}

/// Builds goals and stamps context items with a monotone clock.
#[derive(Debug, Clone)]
pub struct GoalCreator {
    next_seq: u64,
    clock: u64,
}

impl Default for GoalCreator {
    fn default() -> Self {
        Self::new()
    }
}

impl GoalCreator {
    pub fn new() -> Self {
        Self { next_seq: 1, clock: 0 }
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn memory_items(&mut self, memory: &KnowledgeBase, query: &str, k: usize) -> Vec<ContextItem> {
        memory
            .retrieve(query, k, None)
            .into_iter()
            .filter_map(|hit| memory.get(&hit.doc_id).map(|d| (hit, d)))
            .map(|(hit, d)| ContextItem {
                source: ContextSource::Memory,
                modality: Modality::Text,
                content: d.text.clone(),
                confidence: 1.0,
                timestamp: self.tick(),
                ref_id: Some(hit.doc_id),
            })
            .collect()
    }

    fn finish(&mut self, description: String, constraints: BTreeMap<String, String>, context: Vec<ContextItem>, origin: Origin) -> Goal {
        let seq = self.next_seq;
        self.next_seq += 1;
        Goal {
            goal_id: format!("goal-{seq}"),
            description,
            constraints,
            context,
            origin,
            created_seq: seq,
        }
    }

    /// Goal from an articulated utterance plus the `k` most related memories.
    pub fn create_goal_passive(&mut self, utterance: &str, memory: &KnowledgeBase, k: usize) -> Result<Goal, GoalError> {
        if utterance.trim().is_empty() {
            return Err(GoalError::EmptyUtterance);
        }
        let (description, constraints) = parse_constraints(utterance);
        let context = self.memory_items(memory, &description, k);
        Ok(self.finish(description, constraints, context, Origin::Passive))
    }

    /// Goal from an optional utterance plus captured detector events.
    ///
    /// Events at or above `threshold` become detector context and are listed
    /// in the returned notification. With no admitted event the result is
    /// a passive goal and an empty notification.
    pub fn create_goal_proactive(
        &mut self,
        utterance: Option<&str>,
        events: &[DetectorEvent],
        memory: &KnowledgeBase,
        threshold: f64,
        k: usize,
    ) -> Result<(Goal, Notification), GoalError> {
        for e in events {
            if !(0.0..=1.0).contains(&e.confidence) {
                return Err(GoalError::InvalidConfidence {
                    detector_id: e.detector_id.clone(),
                    confidence: e.confidence,
                });
            }
        }
        let utterance = utterance.filter(|u| !u.trim().is_empty());
        let admitted: Vec<&DetectorEvent> = events.iter().filter(|e| e.confidence >= threshold).collect();

        if admitted.is_empty() {
            return match utterance {
                Some(u) => Ok((self.create_goal_passive(u, memory, k)?, Notification::default())),
                None => Err(GoalError::NoSignal),
            };
        }

        let (description, constraints) = match utterance {
            Some(u) => parse_constraints(u),
            None => (
                admitted.iter().map(|e| e.payload.as_str()).collect::<Vec<_>>().join("; "),
                BTreeMap::new(),
            ),
        };

        let mut context = Vec::new();
        if let Some(u) = utterance {
            context.push(ContextItem {
                source: ContextSource::User,
                modality: Modality::Text,
                content: u.to_string(),
                confidence: 1.0,
                timestamp: self.tick(),
                ref_id: None,
            });
        }
        for e in &admitted {
            context.push(ContextItem {
                source: ContextSource::Detector,
                modality: e.modality,
                content: e.payload.clone(),
                confidence: e.confidence,
                timestamp: self.tick(),
                ref_id: Some(e.detector_id.clone()),
            });
        }
        let memory_items = self.memory_items(memory, &description, k);
        context.extend(memory_items);

        let notification = Notification {
            captured: admitted.iter().map(|e| e.detector_id.clone()).collect(),
        };
        Ok((self.finish(description, constraints, context, Origin::Proactive), notification))
    }
}

/// Reads a JSON-lines detector event file.
pub fn load_detector_events(path: &Path) -> Result<Vec<DetectorEvent>, GoalError> {
    let file = std::fs::File::open(path).map_err(|e| GoalError::DetectorFile {
        line: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GoalError::DetectorFile { line: idx + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| GoalError::DetectorFile {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Document;

    #[test]
    fn marker_grammar() {
        let (d, c) = parse_constraints("book flight budget: 500");
        assert_eq!(d, "book flight");
        assert_eq!(c, BTreeMap::from([("budget".into(), "500".into())]));
        let (d, c) = parse_constraints("compute: 2+3");
        assert_eq!(d, "compute: 2+3");
        assert_eq!(c["compute"], "2+3");
        // a trailing marker has no value and stays in the description
        let (d, c) = parse_constraints("go to: ");
        assert_eq!(d, "go to:");
        assert!(c.is_empty());
    }

    #[test]
    fn passive_goal() {
        let mut gc = GoalCreator::new();
        let kb = KnowledgeBase::new();
        let g = gc.create_goal_passive("book flight budget: 500", &kb, 3).unwrap();
        assert_eq!(g.origin, Origin::Passive);
        assert_eq!(g.description, "book flight");
        assert!(g.context.is_empty());
        assert_eq!(gc.create_goal_passive("  ", &kb, 3), Err(GoalError::EmptyUtterance));
    }

    #[test]
    fn proactive_threshold() {
        let mut gc = GoalCreator::new();
        let kb = KnowledgeBase::new();
        let ev = [DetectorEvent::new("d1", Modality::Gesture, "thumbs_up", 0.9)];
        let (g, n) = gc.create_goal_proactive(None, &ev, &kb, 0.5, 0).unwrap();
        assert_eq!(g.origin, Origin::Proactive);
        assert_eq!(g.context.len(), 1);
        assert_eq!(n.captured, vec!["d1"]);

        let ev = [DetectorEvent::new("d1", Modality::Gesture, "thumbs_up", 0.3)];
        assert_eq!(gc.create_goal_proactive(None, &ev, &kb, 0.5, 0), Err(GoalError::NoSignal));
        let (g, n) = gc.create_goal_proactive(Some("hello"), &ev, &kb, 0.5, 0).unwrap();
        assert_eq!(g.origin, Origin::Passive);
        assert!(n.captured.is_empty());
    }

    #[test]
    fn proactive_with_utterance_orders_by_timestamp() {
        let mut gc = GoalCreator::new();
        let mut kb = KnowledgeBase::new();
        kb.index(Document::new("m1", "settings menu location")).unwrap();
        let ev = [DetectorEvent::new("d2", Modality::UiLayout, "settings_icon@(10,20)", 0.8)];
        let (g, n) = gc.create_goal_proactive(Some("open settings"), &ev, &kb, 0.5, 1).unwrap();
        assert_eq!(g.origin, Origin::Proactive);
        let sources: Vec<_> = g.context.iter().map(|c| c.source).collect();
        assert_eq!(sources, [ContextSource::User, ContextSource::Detector, ContextSource::Memory]);
        assert!(g.context.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        assert_eq!(g.context[1].confidence, 0.8);
        assert_eq!(n.captured, vec!["d2"]);
    }

    #[test]
    fn recent_context() {
        let mut kb = KnowledgeBase::new();
        assert!(retrieve_recent_context(&kb, 5).is_empty());
        for i in 1..=10 {
            kb.index(Document::new(format!("doc{i:02}"), format!("text {i}"))).unwrap();
        }
        let items = retrieve_recent_context(&kb, 3);
        let ids: Vec<_> = items.iter().map(|c| c.ref_id.clone().unwrap()).collect();
        assert_eq!(ids, ["doc10", "doc09", "doc08"]);
        assert!(retrieve_recent_context(&kb, 0).is_empty());
    }
}
