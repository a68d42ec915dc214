//! Prompt/response optimiser.
//!
//! Templates render in a fixed layout: the body with its slots filled,
//! then the few-shot examples in registration order, then the goal
//! description (unless the body already binds it through `{goal}` or
//! `{task}`), then the goal constraints as `key: value` lines (unless the
//! body binds `{constraints}`). Caller-supplied slots override
//! goal-derived ones.
//!
//! Template files carry a header of `key: value` lines, a `---` line, and
//! then the body:
//!
//! ```text
//! id: planner
//! max_tokens: 400
//! forbidden: rm -rf, drop table
//! required: goal
//! example: add 1 and 2 => 1. add 1 2
//! ---
//! PLAN the steps for: {goal}
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::RwLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{count_tokens, ModelRequest, Purpose, DEFAULT_MAX_COMPLETION_TOKENS};
use crate::goal::Goal;
use crate::text::{fill_slots, slots};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("template {0} already registered")]
    DuplicateId(String),
    #[error("malformed template {id}: {reason}")]
    MalformedTemplate { id: String, reason: String },
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("missing slot {0}")]
    MissingSlot(String),
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
    #[error("response shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid output spec {id}: {reason}")]
    InvalidSpec { id: String, reason: String },
    #[error("template file {path}: {reason}")]
    TemplateFile { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PromptConstraints {
    pub max_tokens: usize,
    #[serde(default)]
    pub forbidden_terms: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShot {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub body: String,
    #[serde(default)]
    pub required_slots: BTreeSet<String>,
    #[serde(default)]
    pub few_shot_examples: Vec<FewShot>,
    pub constraints: PromptConstraints,
}

impl PromptTemplate {
    pub fn new(template_id: impl Into<String>, body: impl Into<String>, max_tokens: usize) -> Self {
        Self {
            template_id: template_id.into(),
            body: body.into(),
            required_slots: BTreeSet::new(),
            few_shot_examples: Vec::new(),
            constraints: PromptConstraints {
                max_tokens,
                forbidden_terms: BTreeSet::new(),
            },
        }
    }

    pub fn require(mut self, slot: &str) -> Self {
        self.required_slots.insert(slot.to_string());
        self
    }

    pub fn forbid(mut self, term: &str) -> Self {
        self.constraints.forbidden_terms.insert(term.to_string());
        self
    }

    pub fn example(mut self, input: &str, output: &str) -> Self {
        self.few_shot_examples.push(FewShot {
            input: input.into(),
            output: output.into(),
        });
        self
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let malformed = |reason: String| PromptError::MalformedTemplate {
            id: self.template_id.clone(),
            reason,
        };
        if self.template_id.trim().is_empty() {
            return Err(malformed("empty id".into()));
        }
        if self.body.trim().is_empty() {
            return Err(malformed("empty body".into()));
        }
        if self.constraints.max_tokens == 0 {
            return Err(malformed("max_tokens must be positive".into()));
        }
        let present = slots(&self.body);
        for slot in &self.required_slots {
            if !present.contains(slot) {
                return Err(malformed(format!("required slot {{{slot}}} not in body")));
            }
        }
        Ok(())
    }

    /// Parses the template file format described in the module docs.
    pub fn parse_file(source: &str) -> Result<Self, String> {
        let mut lines = source.lines();
        let mut id = None;
        let mut max_tokens = None;
        let mut forbidden = BTreeSet::new();
        let mut required = BTreeSet::new();
        let mut examples = Vec::new();
        let mut saw_separator = false;
        for line in lines.by_ref() {
            let trimmed = line.trim();
            if trimmed == "---" {
                saw_separator = true;
                break;
            }
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once(':')
                .ok_or_else(|| format!("header line without ':': {trimmed}"))?;
            let value = value.trim();
            match key.trim() {
                "id" => id = Some(value.to_string()),
                "max_tokens" => {
                    max_tokens = Some(value.parse::<usize>().map_err(|_| format!("bad max_tokens {value}"))?)
                }
                "forbidden" => forbidden.extend(
                    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from),
                ),
                "required" => required.extend(
                    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from),
                ),
                "example" => {
                    let (i, o) = value
                        .split_once("=>")
                        .ok_or_else(|| format!("example without '=>': {value}"))?;
                    examples.push(FewShot {
                        input: i.trim().to_string(),
                        output: o.trim().replace("\\n", "\n"),
                    });
                }
                other => return Err(format!("unknown header key {other}")),
            }
        }
        if !saw_separator {
            return Err("missing '---' separator".into());
        }
        let body = lines.collect::<Vec<_>>().join("\n").trim().to_string();
        Ok(Self {
            template_id: id.ok_or("missing id")?,
            body,
            required_slots: required,
            few_shot_examples: examples,
            constraints: PromptConstraints {
                max_tokens: max_tokens.ok_or("missing max_tokens")?,
                forbidden_terms: forbidden,
            },
        })
    }
}

/// Request fields the optimiser does not decide itself.
#[derive(Debug, Clone)]
pub struct RequestMeta {
    pub actor_id: String,
    pub seed: u64,
    pub purpose: Purpose,
    pub max_completion_tokens: usize,
}

impl Default for RequestMeta {
    fn default() -> Self {
        Self {
            actor_id: "agent".into(),
            seed: 0,
            purpose: Purpose::Plan,
            max_completion_tokens: DEFAULT_MAX_COMPLETION_TOKENS,
        }
    }
}

fn render_constraints(constraints: &BTreeMap<String, String>) -> String {
    constraints
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn goal_bindings(goal: &Goal) -> HashMap<String, String> {
    let mut b = HashMap::new();
    for (k, v) in &goal.constraints {
        b.insert(k.clone(), v.clone());
    }
    b.insert("goal".into(), goal.description.clone());
    b.insert("task".into(), goal.description.clone());
    b.insert("goal_id".into(), goal.goal_id.clone());
    b.insert("constraints".into(), render_constraints(&goal.constraints));
    b.insert(
        "context".into(),
        goal.context
            .iter()
            .map(|c| format!("- {}", c.content))
            .collect::<Vec<_>>()
            .join("\n"),
    );
    b
}

#[derive(Debug, Default)]
pub struct TemplateRegistry {
    templates: RwLock<BTreeMap<String, PromptTemplate>>,
}

impl TemplateRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_template(&self, template: PromptTemplate) -> Result<String, PromptError> {
        template.validate()?;
        let mut map = self.templates.write().expect("template registry poisoned");
        if map.contains_key(&template.template_id) {
            return Err(PromptError::DuplicateId(template.template_id));
        }
        let id = template.template_id.clone();
        map.insert(id.clone(), template);
        Ok(id)
    }

    pub fn get(&self, template_id: &str) -> Option<PromptTemplate> {
        self.templates.read().expect("template registry poisoned").get(template_id).cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        self.templates.read().expect("template registry poisoned").keys().cloned().collect()
    }

    /// Registers every `*.txt` / `*.tmpl` file in `dir`.
    pub fn load_dir(&self, dir: &Path) -> Result<usize, PromptError> {
        let file_err = |path: &Path, reason: String| PromptError::TemplateFile {
            path: path.display().to_string(),
            reason,
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| file_err(dir, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("txt" | "tmpl")))
            .collect();
        paths.sort();
        for path in &paths {
            let src = std::fs::read_to_string(path).map_err(|e| file_err(path, e.to_string()))?;
            let t = PromptTemplate::parse_file(&src).map_err(|r| file_err(path, r))?;
            self.register_template(t)?;
        }
        Ok(paths.len())
    }

    /// Renders `template_id` for `goal` into a model request.
    pub fn optimise_prompt(
        &self,
        goal: &Goal,
        template_id: &str,
        extra_slots: &BTreeMap<String, String>,
        meta: &RequestMeta,
    ) -> Result<ModelRequest, PromptError> {
        let template = self
            .get(template_id)
            .ok_or_else(|| PromptError::UnknownTemplate(template_id.to_string()))?;
        let text = render(&template, goal, extra_slots)?;
        Ok(ModelRequest {
            prompt_text: text,
            max_completion_tokens: meta.max_completion_tokens,
            seed: meta.seed,
            actor_id: meta.actor_id.clone(),
            purpose: meta.purpose,
        })
    }
}

/// Renders a template against a goal; see the module docs for layout.
pub fn render(template: &PromptTemplate, goal: &Goal, extra_slots: &BTreeMap<String, String>) -> Result<String, PromptError> {
    let mut bindings = goal_bindings(goal);
    for (k, v) in extra_slots {
        bindings.insert(k.clone(), v.clone());
    }
    let body_slots = slots(&template.body);
    if let Some(missing) = body_slots.iter().find(|s| !bindings.contains_key(*s)) {
        return Err(PromptError::MissingSlot(missing.clone()));
    }
    let mut parts = vec![fill_slots(&template.body, |name| bindings.get(name).cloned())];
    if !template.few_shot_examples.is_empty() {
        let shots = template
            .few_shot_examples
            .iter()
            .map(|e| format!("Input: {}\nOutput: {}", e.input, e.output))
            .collect::<Vec<_>>()
            .join("\n");
        parts.push(format!("Examples:\n{shots}"));
    }
    let binds_goal = body_slots.iter().any(|s| s == "goal" || s == "task");
    if !binds_goal {
        parts.push(format!("Goal: {}", goal.description));
    }
    if !goal.constraints.is_empty() && !body_slots.iter().any(|s| s == "constraints") {
        parts.push(render_constraints(&goal.constraints));
    }
    let text = parts.join("\n");

    let lower = text.to_lowercase();
    if let Some(term) = template
        .constraints
        .forbidden_terms
        .iter()
        .find(|t| lower.contains(&t.to_lowercase()))
    {
        return Err(PromptError::ConstraintViolation(format!("forbidden term {term:?}")));
    }
    let tokens = count_tokens(&text);
    if tokens > template.constraints.max_tokens {
        return Err(PromptError::ConstraintViolation(format!(
            "{tokens} tokens exceeds max {}",
            template.constraints.max_tokens
        )));
    }
    Ok(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Plain,
    KeyValue,
    EnumeratedList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub spec_id: String,
    pub shape: Shape,
    #[serde(default)]
    pub required_keys: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_pattern: Option<String>,
}

pub const DEFAULT_ITEM_PATTERN: &str = r"^\d+\.";

impl OutputSpec {
    pub fn plain(id: &str) -> Self {
        Self {
            spec_id: id.into(),
            shape: Shape::Plain,
            required_keys: BTreeSet::new(),
            item_pattern: None,
        }
    }

    pub fn key_value<I: IntoIterator<Item = S>, S: Into<String>>(id: &str, keys: I) -> Self {
        Self {
            spec_id: id.into(),
            shape: Shape::KeyValue,
            required_keys: keys.into_iter().map(Into::into).collect(),
            item_pattern: None,
        }
    }

    pub fn enumerated(id: &str, pattern: &str) -> Self {
        Self {
            spec_id: id.into(),
            shape: Shape::EnumeratedList,
            required_keys: BTreeSet::new(),
            item_pattern: Some(pattern.into()),
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let invalid = |reason: &str| PromptError::InvalidSpec {
            id: self.spec_id.clone(),
            reason: reason.into(),
        };
        if self.shape != Shape::KeyValue && !self.required_keys.is_empty() {
            return Err(invalid("required_keys only apply to key_value"));
        }
        if let Some(p) = &self.item_pattern {
            Regex::new(p).map_err(|e| invalid(&e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", content = "value", rename_all = "snake_case")]
pub enum StructuredResponse {
    Plain(String),
    KeyValue(BTreeMap<String, String>),
    EnumeratedList(Vec<String>),
}

impl StructuredResponse {
    /// A single human-readable answer: the plain text, the value of a
    /// single-key map, or the last list item.
    pub fn primary_text(&self) -> String {
        match self {
            StructuredResponse::Plain(t) => t.clone(),
            StructuredResponse::KeyValue(m) if m.len() == 1 => m.values().next().cloned().unwrap_or_default(),
            StructuredResponse::KeyValue(m) => render_key_value(m),
            StructuredResponse::EnumeratedList(items) => items.last().cloned().unwrap_or_default(),
        }
    }
}

pub fn render_key_value(map: &BTreeMap<String, String>) -> String {
    render_constraints(map)
}

/// Strictly parses `raw` against `spec`. Only surrounding whitespace is
/// forgiven.
pub fn optimise_response(raw: &str, spec: &OutputSpec) -> Result<StructuredResponse, PromptError> {
    spec.validate()?;
    match spec.shape {
        Shape::Plain => Ok(StructuredResponse::Plain(raw.trim().to_string())),
        Shape::KeyValue => {
            let mut map = BTreeMap::new();
            for line in raw.lines().map(str::trim).filter(|l| !l.is_empty()) {
                let (k, v) = line
                    .split_once(':')
                    .ok_or_else(|| PromptError::ShapeMismatch(format!("line {line:?} is not key: value")))?;
                let key = k.trim();
                if key.is_empty() {
                    return Err(PromptError::ShapeMismatch(format!("empty key in {line:?}")));
                }
                if map.insert(key.to_string(), v.trim().to_string()).is_some() {
                    return Err(PromptError::ShapeMismatch(format!("duplicate key {key}")));
                }
            }
            if let Some(missing) = spec.required_keys.iter().find(|k| !map.contains_key(*k)) {
                return Err(PromptError::ShapeMismatch(format!("missing {missing}")));
            }
            Ok(StructuredResponse::KeyValue(map))
        }
        Shape::EnumeratedList => {
            let pattern = Regex::new(spec.item_pattern.as_deref().unwrap_or(DEFAULT_ITEM_PATTERN))
                .map_err(|e| PromptError::InvalidSpec {
                    id: spec.spec_id.clone(),
                    reason: e.to_string(),
                })?;
            let items: Vec<String> = raw
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            if items.is_empty() {
                return Err(PromptError::ShapeMismatch("no list items".into()));
            }
            if let Some(bad) = items.iter().find(|i| !pattern.is_match(i)) {
                return Err(PromptError::ShapeMismatch(format!("item {bad:?} does not match {}", pattern.as_str())));
            }
            Ok(StructuredResponse::EnumeratedList(items))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goal::Origin;

    fn goal(desc: &str) -> Goal {
        Goal {
            goal_id: "g1".into(),
            description: desc.into(),
            constraints: BTreeMap::new(),
            context: vec![],
            origin: Origin::Passive,
            created_seq: 1,
        }
    }

    #[test]
    fn register_and_errors() {
        let reg = TemplateRegistry::new();
        let t = PromptTemplate::new("t1", "Do {task}", 50).require("task");
        assert_eq!(reg.register_template(t.clone()).unwrap(), "t1");
        assert!(reg.get("t1").is_some());
        assert_eq!(reg.register_template(t), Err(PromptError::DuplicateId("t1".into())));
        let bad = PromptTemplate::new("t2", "Do it", 50).require("task");
        assert!(matches!(reg.register_template(bad), Err(PromptError::MalformedTemplate { .. })));
    }

    #[test]
    fn substitution() {
        let reg = TemplateRegistry::new();
        reg.register_template(PromptTemplate::new("t", "Do {task}", 50)).unwrap();
        let req = reg
            .optimise_prompt(&goal("sort list"), "t", &BTreeMap::new(), &RequestMeta::default())
            .unwrap();
        assert_eq!(req.prompt_text, "Do sort list");
    }

    #[test]
    fn missing_slot_and_forbidden() {
        let reg = TemplateRegistry::new();
        reg.register_template(PromptTemplate::new("t", "Write {task} in {lang}", 50)).unwrap();
        let err = reg
            .optimise_prompt(&goal("x"), "t", &BTreeMap::new(), &RequestMeta::default())
            .unwrap_err();
        assert_eq!(err, PromptError::MissingSlot("lang".into()));

        reg.register_template(PromptTemplate::new("f", "Run {task}", 50).forbid("rm -rf")).unwrap();
        let err = reg
            .optimise_prompt(&goal("rm -rf /"), "f", &BTreeMap::new(), &RequestMeta::default())
            .unwrap_err();
        assert!(matches!(err, PromptError::ConstraintViolation(_)));
    }

    #[test]
    fn overflow_is_reported() {
        let t = PromptTemplate::new("t", "{task}", 3);
        assert!(matches!(
            render(&t, &goal("one two three four"), &BTreeMap::new()),
            Err(PromptError::ConstraintViolation(_))
        ));
    }

    #[test]
    fn layout_and_overrides() {
        let mut g = goal("book flight");
        g.constraints.insert("budget".into(), "500".into());
        let t = PromptTemplate::new("t", "You plan trips for {who}.", 100).example("a", "1. b");
        let extra = BTreeMap::from([("who".to_string(), "Ann".to_string())]);
        let text = render(&t, &g, &extra).unwrap();
        assert_eq!(text, "You plan trips for Ann.\nExamples:\nInput: a\nOutput: 1. b\nGoal: book flight\nbudget: 500");
        let extra = BTreeMap::from([("task".to_string(), "override".to_string())]);
        assert_eq!(render(&PromptTemplate::new("t", "{task}", 9), &g, &extra).unwrap(), "override\nbudget: 500");
    }

    #[test]
    fn template_file() {
        let src = "id: planner\nmax_tokens: 40\nforbidden: rm -rf, drop table\nrequired: goal\nexample: x => 1. y\n---\nPLAN: {goal}\n";
        let t = PromptTemplate::parse_file(src).unwrap();
        assert_eq!(t.template_id, "planner");
        assert_eq!(t.constraints.forbidden_terms.len(), 2);
        assert_eq!(t.body, "PLAN: {goal}");
        t.validate().unwrap();
        assert!(PromptTemplate::parse_file("id: x\nmax_tokens: 3\nPLAN").is_err());
    }

    #[test]
    fn response_shapes() {
        let kv = OutputSpec::key_value("s", ["name"]);
        assert_eq!(
            optimise_response("name: alpha", &kv).unwrap(),
            StructuredResponse::KeyValue(BTreeMap::from([("name".into(), "alpha".into())]))
        );
        assert_eq!(
            optimise_response("title: x", &kv),
            Err(PromptError::ShapeMismatch("missing name".into()))
        );
        let list = OutputSpec::enumerated("l", r"^\d+\.");
        assert_eq!(
            optimise_response("1. A\n2. B", &list).unwrap(),
            StructuredResponse::EnumeratedList(vec!["1. A".into(), "2. B".into()])
        );
        assert!(optimise_response("1. A\nB", &list).is_err());
        assert_eq!(
            optimise_response("  hi \n", &OutputSpec::plain("p")).unwrap(),
            StructuredResponse::Plain("hi".into())
        );
        let mut bad = OutputSpec::plain("p");
        bad.required_keys.insert("x".into());
        assert!(bad.validate().is_err());
    }
}
