//! Rule-based guardrails for model inputs and outputs.
//!
//! A [`GuardPipeline`] holds rules sorted by `(order, rule_id)`. A check runs
//! every applicable rule in that order: block rules stop processing, while
//! transforms compose left to right. Rule files are JSON lists:
//!
//! ```json
//! [{"rule_id": "pii", "scope": "both", "modality": "text", "kind": "pattern_redact",
//!   "params": {"pattern": "EMAIL", "label": "EMAIL"}, "order": 10}]
//! ```
//!
//! Parameters per kind:
//!
//! * `keyword_block`: `keywords` (list, matched case-insensitively as substrings)
//! * `pattern_redact`: `pattern` (`EMAIL`, `PHONE`, or `re:<regex>`) and `label`
//! * `max_length`: `max_chars`, optional `action` (`block` by default, or `truncate`)
//! * `schema_check`: `spec`, an output spec object

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, RwLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::audit::{kinds, EventLog};
use crate::gateway::{CallRecord, FinishReason, GatewayError, ModelBackend, ModelRequest, ModelResponse};
use crate::prompt::{optimise_response, OutputSpec};

pub const EMAIL_PATTERN: &str = r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}";
pub const PHONE_PATTERN: &str = r"\+?\d(?:[ .-]?\(?\d\)?){6,14}";

pub const GUARD_ACTOR: &str = "guardrails";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuardError {
    #[error("duplicate rule id {0}")]
    DuplicateId(String),
    #[error("malformed rule {rule_id}: {reason}")]
    MalformedRule { rule_id: String, reason: String },
    #[error("rule file: {0}")]
    RuleFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Input,
    Output,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuardModality {
    #[default]
    Text,
    ImageDescriptor,
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    KeywordBlock,
    PatternRedact,
    MaxLength,
    SchemaCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardRule {
    pub rule_id: String,
    pub scope: Scope,
    #[serde(default = "any_modality")]
    pub modality: GuardModality,
    pub kind: RuleKind,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    #[serde(default)]
    pub order: i64,
}

fn any_modality() -> GuardModality {
    GuardModality::Any
}

impl GuardRule {
    pub fn new(rule_id: &str, scope: Scope, kind: RuleKind, order: i64) -> Self {
        Self {
            rule_id: rule_id.to_string(),
            scope,
            modality: GuardModality::Any,
            kind,
            params: BTreeMap::new(),
            order,
        }
    }

    pub fn param(mut self, key: &str, value: Value) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn with_modality(mut self, modality: GuardModality) -> Self {
        self.modality = modality;
        self
    }

    pub fn keyword_block(rule_id: &str, scope: Scope, keywords: &[&str], order: i64) -> Self {
        Self::new(rule_id, scope, RuleKind::KeywordBlock, order).param("keywords", json!(keywords))
    }

    pub fn redact(rule_id: &str, scope: Scope, pattern: &str, label: &str, order: i64) -> Self {
        Self::new(rule_id, scope, RuleKind::PatternRedact, order)
            .param("pattern", json!(pattern))
            .param("label", json!(label))
    }

    pub fn max_length(rule_id: &str, scope: Scope, max_chars: usize, truncate: bool, order: i64) -> Self {
        Self::new(rule_id, scope, RuleKind::MaxLength, order)
            .param("max_chars", json!(max_chars))
            .param("action", json!(if truncate { "truncate" } else { "block" }))
    }

    pub fn schema_check(rule_id: &str, scope: Scope, spec: &OutputSpec, order: i64) -> Self {
        Self::new(rule_id, scope, RuleKind::SchemaCheck, order).param("spec", json!(spec))
    }
}

#[derive(Debug, Clone)]
enum Check {
    Keywords(Vec<String>),
    Redact { pattern: Regex, replacement: String },
    MaxLength { max_chars: usize, truncate: bool },
    Schema(OutputSpec),
}

#[derive(Debug, Clone)]
struct CompiledRule {
    rule: GuardRule,
    check: Check,
}

fn compile(rule: &GuardRule) -> Result<Check, GuardError> {
    let bad = |reason: &str| GuardError::MalformedRule {
        rule_id: rule.rule_id.clone(),
        reason: reason.to_string(),
    };
    let string = |key: &str| rule.params.get(key).and_then(Value::as_str);
    match rule.kind {
        RuleKind::KeywordBlock => {
            let list = rule
                .params
                .get("keywords")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("keywords list required"))?;
            let keywords: Vec<String> = list
                .iter()
                .map(|v| v.as_str().map(str::to_lowercase))
                .collect::<Option<_>>()
                .ok_or_else(|| bad("keywords must be strings"))?;
            if keywords.is_empty() || keywords.iter().any(|k| k.trim().is_empty()) {
                return Err(bad("keywords must be non-empty"));
            }
            Ok(Check::Keywords(keywords))
        }
        RuleKind::PatternRedact => {
            let pattern = string("pattern").ok_or_else(|| bad("pattern required"))?;
            let label = string("label").ok_or_else(|| bad("replacement label required"))?;
            if label.trim().is_empty() {
                return Err(bad("replacement label required"));
            }
            let source = match pattern {
                "EMAIL" => EMAIL_PATTERN,
                "PHONE" => PHONE_PATTERN,
                p => p.strip_prefix("re:").ok_or_else(|| bad("pattern must be EMAIL, PHONE or re:<regex>"))?,
            };
            let pattern = Regex::new(source).map_err(|e| bad(&e.to_string()))?;
            Ok(Check::Redact {
                pattern,
                replacement: format!("[REDACTED:{label}]"),
            })
        }
        RuleKind::MaxLength => {
            let max_chars = rule
                .params
                .get("max_chars")
                .and_then(Value::as_u64)
                .ok_or_else(|| bad("max_chars required"))? as usize;
            let truncate = match string("action").unwrap_or("block") {
                "block" => false,
                "truncate" => true,
                other => return Err(bad(&format!("unknown action {other}"))),
            };
            Ok(Check::MaxLength { max_chars, truncate })
        }
        RuleKind::SchemaCheck => {
            let spec: OutputSpec = rule
                .params
                .get("spec")
                .cloned()
                .ok_or_else(|| bad("spec required"))
                .and_then(|v| serde_json::from_value(v).map_err(|e| bad(&e.to_string())))?;
            spec.validate().map_err(|e| bad(&e.to_string()))?;
            Ok(Check::Schema(spec))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardVerdict {
    Pass,
    Transform,
    Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardDecision {
    pub verdict: GuardVerdict,
    pub content_out: Option<String>,
    pub fired_rules: Vec<String>,
    pub rationale: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Input,
    Output,
}

/// Ordered guard rules. Reads are concurrent; registration is serialized.
#[derive(Debug, Default)]
pub struct GuardPipeline {
    rules: RwLock<Vec<CompiledRule>>,
}

impl Clone for GuardPipeline {
    fn clone(&self) -> Self {
        Self {
            rules: RwLock::new(self.rules.read().expect("guard rules poisoned").clone()),
        }
    }
}

impl GuardPipeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rules(rules: Vec<GuardRule>) -> Result<Self, GuardError> {
        let pipeline = Self::new();
        for r in rules {
            pipeline.register_rule(r)?;
        }
        Ok(pipeline)
    }

    pub fn from_json(source: &str) -> Result<Self, GuardError> {
        let rules: Vec<GuardRule> = serde_json::from_str(source).map_err(|e| GuardError::RuleFile(e.to_string()))?;
        Self::from_rules(rules)
    }

    pub fn load(path: &Path) -> Result<Self, GuardError> {
        let source =
            std::fs::read_to_string(path).map_err(|e| GuardError::RuleFile(format!("{}: {e}", path.display())))?;
        Self::from_json(&source)
    }

    pub fn register_rule(&self, rule: GuardRule) -> Result<String, GuardError> {
        let check = compile(&rule)?;
        let mut rules = self.rules.write().expect("guard rules poisoned");
        if rules.iter().any(|r| r.rule.rule_id == rule.rule_id) {
            return Err(GuardError::DuplicateId(rule.rule_id));
        }
        let key = (rule.order, rule.rule_id.clone());
        let pos = rules.partition_point(|r| (r.rule.order, r.rule.rule_id.clone()) < key);
        let id = rule.rule_id.clone();
        rules.insert(pos, CompiledRule { rule, check });
        Ok(id)
    }

    pub fn rules(&self) -> Vec<GuardRule> {
        self.rules.read().expect("guard rules poisoned").iter().map(|r| r.rule.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.rules.read().expect("guard rules poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_input(&self, content: &str, modality: GuardModality) -> GuardDecision {
        self.check(Direction::Input, content, modality)
    }

    pub fn check_output(&self, content: &str, modality: GuardModality) -> GuardDecision {
        self.check(Direction::Output, content, modality)
    }

    pub fn check(&self, direction: Direction, content: &str, modality: GuardModality) -> GuardDecision {
        let rules = self.rules.read().expect("guard rules poisoned");
        let mut current = content.to_string();
        let mut fired = Vec::new();
        let mut notes = Vec::new();
        for r in rules.iter() {
            let scoped = matches!(
                (r.rule.scope, direction),
                (Scope::Both, _) | (Scope::Input, Direction::Input) | (Scope::Output, Direction::Output)
            );
            let modal = r.rule.modality == GuardModality::Any || modality == GuardModality::Any || r.rule.modality == modality;
            if !scoped || !modal {
                continue;
            }
            let block = |fired: &mut Vec<String>, mut notes: Vec<String>, why: String| {
                fired.push(r.rule.rule_id.clone());
                notes.push(why);
                GuardDecision {
                    verdict: GuardVerdict::Block,
                    content_out: None,
                    fired_rules: fired.clone(),
                    rationale: notes.join("; "),
                }
            };
            match &r.check {
                Check::Keywords(words) => {
                    let lower = current.to_lowercase();
                    if let Some(w) = words.iter().find(|w| lower.contains(w.as_str())) {
                        return block(&mut fired, notes, format!("{}: blocked term {w:?}", r.rule.rule_id));
                    }
                }
                Check::Redact { pattern, replacement } => {
                    let replaced = pattern.replace_all(&current, replacement.as_str()).into_owned();
                    if replaced != current {
                        fired.push(r.rule.rule_id.clone());
                        notes.push(format!("{}: redacted", r.rule.rule_id));
                        current = replaced;
                    }
                }
                Check::MaxLength { max_chars, truncate } => {
                    let len = current.chars().count();
                    if len > *max_chars {
                        if !truncate {
                            return block(
                                &mut fired,
                                notes,
                                format!("{}: {len} chars exceeds {max_chars}", r.rule.rule_id),
                            );
                        }
                        current = current.chars().take(*max_chars).collect();
                        fired.push(r.rule.rule_id.clone());
                        notes.push(format!("{}: truncated to {max_chars} chars", r.rule.rule_id));
                    }
                }
                Check::Schema(spec) => {
                    if let Err(e) = optimise_response(&current, spec) {
                        return block(&mut fired, notes, format!("{}: {e}", r.rule.rule_id));
                    }
                }
            }
        }
        let verdict = if current == content {
            GuardVerdict::Pass
        } else {
            GuardVerdict::Transform
        };
        GuardDecision {
            verdict,
            content_out: Some(current),
            fired_rules: fired,
            rationale: if notes.is_empty() { "no rule fired".into() } else { notes.join("; ") },
        }
    }
}

/// Backend wrapper that runs every prompt through the input rules and every
/// completion through the output rules, logging each decision.
pub struct GuardedBackend {
    inner: Arc<dyn ModelBackend>,
    pipeline: Arc<GuardPipeline>,
    log: Option<Arc<EventLog>>,
}

impl GuardedBackend {
    pub fn new(inner: Arc<dyn ModelBackend>, pipeline: Arc<GuardPipeline>, log: Option<Arc<EventLog>>) -> Self {
        Self { inner, pipeline, log }
    }

    fn record(&self, event_type: &str, actor: &str, decision: &GuardDecision) {
        if let Some(log) = &self.log {
            log.append(
                GUARD_ACTOR,
                event_type,
                &json!({"for_actor": actor, "verdict": decision.verdict,
                        "fired_rules": decision.fired_rules, "rationale": decision.rationale}),
            );
        }
    }
}

impl ModelBackend for GuardedBackend {
    fn generate(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let input = self.pipeline.check_input(&request.prompt_text, GuardModality::Text);
        self.record(kinds::GUARD_INPUT, &request.actor_id, &input);
        let prompt = match input.content_out {
            Some(p) => p,
            None => return Err(GatewayError::GuardBlocked(input.fired_rules)),
        };
        let mut forwarded = request.clone();
        forwarded.prompt_text = prompt;
        let mut response = self.inner.generate(&forwarded)?;
        let output = self.pipeline.check_output(&response.text, GuardModality::Text);
        self.record(kinds::GUARD_OUTPUT, &request.actor_id, &output);
        match output.content_out {
            Some(text) => response.text = text,
            None => {
                response.text = String::new();
                response.finish_reason = FinishReason::Blocked;
            }
        }
        Ok(response)
    }

    fn window_tokens(&self) -> usize {
        self.inner.window_tokens()
    }

    fn unit_price(&self) -> f64 {
        self.inner.unit_price()
    }

    fn call_log(&self) -> Vec<CallRecord> {
        self.inner.call_log()
    }

    fn call_count(&self) -> usize {
        self.inner.call_count()
    }
}

/// Ids of all rules in `pipeline`, for quick listing.
pub fn rule_ids(pipeline: &GuardPipeline) -> BTreeSet<String> {
    pipeline.rules().into_iter().map(|r| r.rule_id).collect()
}
