//! Foundation-model gateway.
//!
//! [`ModelBackend`] is the abstract backend every agent talks to. Real
//! provider clients plug in by implementing it; the crate ships
//! [`ScriptedBackend`], a deterministic rule-driven stand-in whose output
//! is a pure function of `(rules, prompt, seed)`.
//!
//! [`Gateway`] layers the two querying styles on top of a backend
//! (one-shot and incremental), plus usage metering and an optional cost
//! cap. Tokens are whitespace-delimited words everywhere in the crate.

mod rules;
mod session;

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub use rules::{parse_rules, Matcher, ScriptedRule};
pub use session::{split_context, ModelSession, SessionTurn};

use crate::text::fill_slots;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("prompt of {tokens} tokens exceeds window of {window}")]
    WindowExceeded { tokens: usize, window: usize },
    #[error("no scripted rule matches the prompt")]
    NoRuleMatch,
    #[error("budget cap {cap} would be crossed (spent {spent}, projected {projected})")]
    BudgetExceeded { cap: f64, spent: f64, projected: f64 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid window: reserved {reserved} must be below window {window}")]
    InvalidWindow { window: usize, reserved: usize },
    #[error("rule file line {line}: {message}")]
    RulesParse { line: usize, message: String },
    #[error("duplicate rule id {0}")]
    DuplicateRule(String),
    #[error("rule {0} has no responses")]
    EmptyResponses(String),
    #[error("input blocked by guardrail rules {0:?}")]
    GuardBlocked(Vec<String>),
    #[error("backend failure: {0}")]
    Backend(String),
}

pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Plan,
    Reflect,
    Debate,
    Optimise,
    #[default]
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub prompt_text: String,
    pub max_completion_tokens: usize,
    pub seed: u64,
    pub actor_id: String,
    pub purpose: Purpose,
}

pub const DEFAULT_MAX_COMPLETION_TOKENS: usize = 256;

impl ModelRequest {
    pub fn new(prompt_text: impl Into<String>, actor_id: impl Into<String>) -> Self {
        Self {
            prompt_text: prompt_text.into(),
            max_completion_tokens: DEFAULT_MAX_COMPLETION_TOKENS,
            seed: 0,
            actor_id: actor_id.into(),
            purpose: Purpose::Other,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_purpose(mut self, purpose: Purpose) -> Self {
        self.purpose = purpose;
        self
    }

    pub fn with_max_completion(mut self, tokens: usize) -> Self {
        self.max_completion_tokens = tokens;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt_text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if self.max_completion_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_completion_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Complete,
    Truncated,
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Usage {
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
    pub cost_units: f64,
}

/// One entry of a backend's append-only call log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub seq: u64,
    pub actor_id: String,
    pub purpose: Purpose,
    pub seed: u64,
    pub prompt_text: String,
    pub response_text: String,
    pub rule_id: Option<String>,
    pub usage: Usage,
    pub cost_units: f64,
}

/// Abstract foundation-model backend.
pub trait ModelBackend: Send + Sync {
    fn generate(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError>;

    fn window_tokens(&self) -> usize;

    fn unit_price(&self) -> f64;

    /// Snapshot of every successful call, in call order.
    fn call_log(&self) -> Vec<CallRecord>;

    fn call_count(&self) -> usize {
        self.call_log().len()
    }
}

pub const DEFAULT_WINDOW_TOKENS: usize = 4096;

/// Deterministic rule-driven backend.
pub struct ScriptedBackend {
    rules: Vec<ScriptedRule>,
    fallback: Option<String>,
    window_tokens: usize,
    unit_price: f64,
    log: Mutex<Vec<CallRecord>>,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("rules", &self.rules.len())
            .field("window_tokens", &self.window_tokens)
            .field("calls", &self.call_count())
            .finish()
    }
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptedRule>) -> Result<Self, GatewayError> {
        Ok(Self {
            rules: rules::sort_rules(rules)?,
            fallback: None,
            window_tokens: DEFAULT_WINDOW_TOKENS,
            unit_price: 0.0,
            log: Mutex::new(Vec::new()),
        })
    }

    pub fn from_rule_file(source: &str) -> Result<Self, GatewayError> {
        Self::new(parse_rules(source)?)
    }

    pub fn with_fallback(mut self, response: impl Into<String>) -> Self {
        self.fallback = Some(response.into());
        self
    }

    pub fn with_window(mut self, window_tokens: usize) -> Self {
        self.window_tokens = window_tokens;
        self
    }

    pub fn with_unit_price(mut self, price: f64) -> Self {
        self.unit_price = price.max(0.0);
        self
    }

    pub fn rules(&self) -> &[ScriptedRule] {
        &self.rules
    }

    fn render(&self, prompt: &str, seed: u64) -> Option<(Option<String>, String)> {
        for rule in &self.rules {
            if let Some(caps) = rule.matcher.captures(prompt) {
                let idx = (seed % rule.responses.len() as u64) as usize;
                let text = fill_slots(&rule.responses[idx], |name| {
                    if name == "prompt" {
                        Some(prompt.to_string())
                    } else {
                        caps.get(name)
                    }
                });
                return Some((Some(rule.rule_id.clone()), text));
            }
        }
        self.fallback.clone().map(|f| (None, f))
    }
}

/// Keeps the first `limit` tokens of `text`, preserving original spacing.
fn truncate_tokens(text: &str, limit: usize) -> String {
    let mut seen = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_token {
                in_token = false;
                if seen == limit {
                    return text[..i].to_string();
                }
            }
        } else if !in_token {
            in_token = true;
            seen += 1;
        }
    }
    text.to_string()
}

impl ModelBackend for ScriptedBackend {
    fn generate(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        request.validate()?;
        let prompt_tokens = count_tokens(&request.prompt_text);
        if prompt_tokens > self.window_tokens {
            return Err(GatewayError::WindowExceeded {
                tokens: prompt_tokens,
                window: self.window_tokens,
            });
        }
        let (rule_id, mut text) = self
            .render(&request.prompt_text, request.seed)
            .ok_or(GatewayError::NoRuleMatch)?;
        let mut finish_reason = FinishReason::Complete;
        if count_tokens(&text) > request.max_completion_tokens {
            text = truncate_tokens(&text, request.max_completion_tokens);
            finish_reason = FinishReason::Truncated;
        }
        let usage = Usage {
            prompt_tokens,
            completion_tokens: count_tokens(&text),
        };
        let cost_units = (usage.prompt_tokens + usage.completion_tokens) as f64 * self.unit_price;

        let mut log = self.log.lock().expect("call log poisoned");
        let seq = log.len() as u64 + 1;
        log.push(CallRecord {
            seq,
            actor_id: request.actor_id.clone(),
            purpose: request.purpose,
            seed: request.seed,
            prompt_text: request.prompt_text.clone(),
            response_text: text.clone(),
            rule_id,
            usage,
            cost_units,
        });
        Ok(ModelResponse {
            text,
            finish_reason,
            usage,
            cost_units,
        })
    }

    fn window_tokens(&self) -> usize {
        self.window_tokens
    }

    fn unit_price(&self) -> f64 {
        self.unit_price
    }

    fn call_log(&self) -> Vec<CallRecord> {
        self.log.lock().expect("call log poisoned").clone()
    }

    fn call_count(&self) -> usize {
        self.log.lock().expect("call log poisoned").len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UsageTotals {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_units: f64,
}

impl UsageTotals {
    fn add(&mut self, usage: &Usage, cost: f64) {
        self.prompt_tokens += usage.prompt_tokens as u64;
        self.completion_tokens += usage.completion_tokens as u64;
        self.cost_units += cost;
    }
}

/// Token and cost accounting per actor.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UsageMeter {
    pub per_actor: BTreeMap<String, UsageTotals>,
    pub total: UsageTotals,
}

impl UsageMeter {
    pub fn record(&mut self, actor_id: &str, usage: &Usage, cost_units: f64) {
        self.per_actor
            .entry(actor_id.to_string())
            .or_default()
            .add(usage, cost_units);
        self.total.add(usage, cost_units);
    }

    /// Rebuilds a meter from a call log.
    pub fn replay(log: &[CallRecord]) -> Self {
        let mut meter = Self::default();
        for call in log {
            meter.record(&call.actor_id, &call.usage, call.cost_units);
        }
        meter
    }

    pub fn merge(&mut self, other: &UsageMeter) {
        for (actor, t) in &other.per_actor {
            let e = self.per_actor.entry(actor.clone()).or_default();
            e.prompt_tokens += t.prompt_tokens;
            e.completion_tokens += t.completion_tokens;
            e.cost_units += t.cost_units;
        }
        self.total.prompt_tokens += other.total.prompt_tokens;
        self.total.completion_tokens += other.total.completion_tokens;
        self.total.cost_units += other.total.cost_units;
    }
}

/// A metered handle on a backend. Cloning shares the backend and meter.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ModelBackend>,
    meter: Arc<Mutex<UsageMeter>>,
    budget_cap: Option<f64>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("calls", &self.backend.call_count())
            .field("budget_cap", &self.budget_cap)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ModelBackend>) -> Self {
        Self {
            backend,
            meter: Arc::new(Mutex::new(UsageMeter::default())),
            budget_cap: None,
        }
    }

    pub fn scripted(backend: ScriptedBackend) -> Self {
        Self::new(Arc::new(backend))
    }

    pub fn with_budget_cap(mut self, cap: Option<f64>) -> Self {
        self.budget_cap = cap;
        self
    }

    /// Starts the meter from `usage` instead of zero.
    pub fn with_usage(self, usage: UsageMeter) -> Self {
        *self.meter.lock().expect("meter poisoned") = usage;
        self
    }

    /// A gateway over another backend that charges this gateway's meter and
    /// budget.
    pub fn sharing_meter(&self, backend: Arc<dyn ModelBackend>) -> Self {
        Self {
            backend,
            meter: Arc::clone(&self.meter),
            budget_cap: self.budget_cap,
        }
    }

    pub fn backend(&self) -> &Arc<dyn ModelBackend> {
        &self.backend
    }

    pub fn call_count(&self) -> usize {
        self.backend.call_count()
    }

    pub fn usage(&self) -> UsageMeter {
        self.meter.lock().expect("meter poisoned").clone()
    }

    /// Raw backend call with metering; no budget check.
    pub fn generate(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let response = self.backend.generate(request)?;
        self.meter
            .lock()
            .expect("meter poisoned")
            .record(&request.actor_id, &response.usage, response.cost_units);
        Ok(response)
    }

    fn check_budget(&self, request: &ModelRequest) -> Result<(), GatewayError> {
        let Some(cap) = self.budget_cap else {
            return Ok(());
        };
        let spent = self.meter.lock().expect("meter poisoned").total.cost_units;
        let worst = (count_tokens(&request.prompt_text) + request.max_completion_tokens) as f64
            * self.backend.unit_price();
        let projected = spent + worst;
        if projected > cap {
            return Err(GatewayError::BudgetExceeded {
                cap,
                spent,
                projected,
            });
        }
        Ok(())
    }

    /// Sends a fully assembled prompt in a single backend call.
    pub fn one_shot_query(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        request.validate()?;
        let tokens = count_tokens(&request.prompt_text);
        let window = self.backend.window_tokens();
        if tokens > window {
            return Err(GatewayError::WindowExceeded { tokens, window });
        }
        self.check_budget(request)?;
        self.generate(request)
    }

    /// Sends one increment of a step-by-step exchange.
    ///
    /// The prompt is the session preamble, as much recent history as fits,
    /// and the increment. History that no longer fits is dropped oldest
    /// first and the response is flagged `Truncated`.
    pub fn incremental_query(
        &self,
        session: &mut ModelSession,
        increment: &str,
    ) -> Result<ModelResponse, GatewayError> {
        let (request, history_dropped) = session.assemble(increment)?;
        self.check_budget(&request)?;
        let mut response = self.generate(&request)?;
        if history_dropped && response.finish_reason == FinishReason::Complete {
            response.finish_reason = FinishReason::Truncated;
        }
        session.record(increment, request, response.clone());
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend(src: &str) -> ScriptedBackend {
        ScriptedBackend::from_rule_file(src).unwrap()
    }

    #[test]
    fn echo_rule_is_identity() {
        let b = backend("echo | 0 | echo:* | {prompt}");
        let r = b.generate(&ModelRequest::new("echo: hi", "a")).unwrap();
        assert_eq!(r.text, "echo: hi");
        assert_eq!(r.finish_reason, FinishReason::Complete);
    }

    #[test]
    fn plan_rule_and_call_log() {
        let b = backend("r1 | 0 | PLAN | 1. A; 2. B");
        let before = b.call_count();
        let r = b
            .generate(&ModelRequest::new("please PLAN this", "a"))
            .unwrap();
        assert_eq!(r.text, "1. A; 2. B");
        assert_eq!(b.call_count(), before + 1);
        assert_eq!(b.call_log()[0].rule_id.as_deref(), Some("r1"));
    }

    #[test]
    fn window_exceeded_makes_no_call() {
        let b = backend("r1 | 0 | w | ok").with_window(100);
        let prompt = vec!["w"; 200].join(" ");
        let err = b.generate(&ModelRequest::new(prompt, "a")).unwrap_err();
        assert_eq!(err, GatewayError::WindowExceeded { tokens: 200, window: 100 });
        assert_eq!(b.call_count(), 0);
    }

    #[test]
    fn priority_then_rule_id() {
        let b = backend("b | 1 | X | from-b\na | 1 | X | from-a\nc | 0 | X | from-c\nd | 2 | Y | from-d");
        let r = b.generate(&ModelRequest::new("X", "a")).unwrap();
        assert_eq!(r.text, "from-a");
        let r = b.generate(&ModelRequest::new("X Y", "a")).unwrap();
        assert_eq!(r.text, "from-d");
    }

    #[test]
    fn no_match_errors_unless_fallback() {
        let b = backend("r | 0 | X | y");
        assert_eq!(
            b.generate(&ModelRequest::new("nothing", "a")).unwrap_err(),
            GatewayError::NoRuleMatch
        );
        assert_eq!(b.call_count(), 0);
        let b = backend("r | 0 | X | y").with_fallback("default");
        assert_eq!(b.generate(&ModelRequest::new("nothing", "a")).unwrap().text, "default");
    }

    #[test]
    fn seed_selects_response() {
        let b = backend("r | 0 | Q | zero ;; one ;; two");
        let texts: Vec<_> = (0..4)
            .map(|s| b.generate(&ModelRequest::new("Q", "a").with_seed(s)).unwrap().text)
            .collect();
        assert_eq!(texts, ["zero", "one", "two", "zero"]);
    }

    #[test]
    fn regex_captures_fill_template() {
        let b = backend(r"copy | 0 | re:(?m)^a: (?P<last>.*)$ | {last}");
        let r = b
            .generate(&ModelRequest::new("round 1\na: forty two\nb: x", "b"))
            .unwrap();
        assert_eq!(r.text, "forty two");
    }

    #[test]
    fn completion_truncation() {
        let b = backend("r | 0 | Q | one two\\nthree four");
        let r = b
            .generate(&ModelRequest::new("Q", "a").with_max_completion(3))
            .unwrap();
        assert_eq!(r.text, "one two\nthree");
        assert_eq!(r.finish_reason, FinishReason::Truncated);
        assert_eq!(r.usage.completion_tokens, 3);
    }

    #[test]
    fn cost_is_tokens_times_price() {
        let b = backend("r | 0 | Q | a b c").with_unit_price(0.5);
        let r = b.generate(&ModelRequest::new("Q Q", "a")).unwrap();
        assert_eq!(r.usage, Usage { prompt_tokens: 2, completion_tokens: 3 });
        assert_eq!(r.cost_units, 2.5);
    }

    #[test]
    fn one_shot_deltas() {
        let g = Gateway::scripted(backend("r | 0 | PLAN | 1. A").with_window(10));
        let req = ModelRequest::new("PLAN it", "a");
        let a = g.one_shot_query(&req).unwrap();
        let b = g.one_shot_query(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(g.call_count(), 2);
        let long = ModelRequest::new(vec!["PLAN"; 11].join(" "), "a");
        assert!(matches!(g.one_shot_query(&long), Err(GatewayError::WindowExceeded { .. })));
        assert_eq!(g.call_count(), 2);
    }

    #[test]
    fn budget_cap_blocks_before_call() {
        let g = Gateway::scripted(backend("r | 0 | Q | a").with_unit_price(1.0))
            .with_budget_cap(Some(5.0));
        let req = ModelRequest::new("Q", "a").with_max_completion(2);
        g.one_shot_query(&req).unwrap(); // spent 2, worst case next 3
        g.one_shot_query(&req).unwrap(); // spent 4
        let err = g.one_shot_query(&req).unwrap_err();
        assert!(matches!(err, GatewayError::BudgetExceeded { .. }));
        assert_eq!(g.call_count(), 2);
        assert_eq!(g.usage().total.cost_units, 4.0);
    }

    #[test]
    fn meter_matches_replay() {
        let g = Gateway::scripted(backend("r | 0 | * | ok {prompt}").with_unit_price(0.25));
        for (i, actor) in ["a", "b", "a", "c"].iter().enumerate() {
            g.one_shot_query(&ModelRequest::new(format!("q{i} x"), *actor)).unwrap();
        }
        assert_eq!(g.usage(), UsageMeter::replay(&g.backend().call_log()));
        assert_eq!(g.usage().per_actor["a"].prompt_tokens, 4);
    }
}
