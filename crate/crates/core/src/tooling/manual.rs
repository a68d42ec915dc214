//! Tool manuals.
//!
//! A manual starts with a `tool:` line, followed by operations. Each `op:`
//! line opens an operation; `param:` and `result:` lines belong to the most
//! recent operation. Blank lines and `#` comments are ignored.
//!
//! ```text
//! tool: calculator
//! op: add
//! param: a: number required
//! param: b: number required
//! result: key_value{sum}
//! ```
//!
//! Result shapes are `plain`, `key_value{k1,k2}`, or
//! `enumerated_list{pattern}` (pattern optional).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ToolError;
use crate::prompt::{OutputSpec, Shape, DEFAULT_ITEM_PATTERN};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub semantic_type: String,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Operation {
    pub name: String,
    pub params: Vec<Param>,
    pub result_shape: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub tool_id: String,
    pub operations: Vec<Operation>,
}

impl ToolDescriptor {
    pub fn operation(&self, name: &str) -> Option<&Operation> {
        self.operations.iter().find(|o| o.name == name)
    }

    /// The manual text that [`learn_interface`] reads back into `self`.
    pub fn to_manual(&self) -> String {
        let mut out = format!("tool: {}\n", self.tool_id);
        for op in &self.operations {
            out.push_str(&format!("op: {}\n", op.name));
            for p in &op.params {
                let req = if p.required { "required" } else { "optional" };
                out.push_str(&format!("param: {}: {} {}\n", p.name, p.semantic_type, req));
            }
            out.push_str(&format!("result: {}\n", render_shape(&op.result_shape)));
        }
        out
    }
}

fn render_shape(spec: &OutputSpec) -> String {
    match spec.shape {
        Shape::Plain => "plain".into(),
        Shape::KeyValue => format!("key_value{{{}}}", spec.required_keys.iter().cloned().collect::<Vec<_>>().join(",")),
        Shape::EnumeratedList => format!(
            "enumerated_list{{{}}}",
            spec.item_pattern.as_deref().unwrap_or(DEFAULT_ITEM_PATTERN)
        ),
    }
}

fn parse_shape(spec_id: &str, text: &str) -> Result<OutputSpec, String> {
    let (name, arg) = match text.find('{') {
        Some(open) => {
            let close = text.rfind('}').filter(|c| *c > open).ok_or("unclosed '{'")?;
            if !text[close + 1..].trim().is_empty() {
                return Err("trailing text after shape".into());
            }
            (text[..open].trim(), Some(&text[open + 1..close]))
        }
        None => (text.trim(), None),
    };
    let spec = match (name, arg) {
        ("plain", None) => OutputSpec::plain(spec_id),
        ("key_value", Some(keys)) => {
            let keys: BTreeSet<String> = keys.split(',').map(str::trim).filter(|k| !k.is_empty()).map(String::from).collect();
            OutputSpec::key_value(spec_id, keys)
        }
        ("key_value", None) => OutputSpec::key_value(spec_id, Vec::<String>::new()),
        ("enumerated_list", pattern) => OutputSpec::enumerated(spec_id, pattern.unwrap_or(DEFAULT_ITEM_PATTERN)),
        _ => return Err(format!("unknown result shape {text:?}")),
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

/// Parses a tool manual into a descriptor, keeping document order.
pub fn learn_interface(manual: &str) -> Result<ToolDescriptor, ToolError> {
    let mut tool_id: Option<String> = None;
    let mut operations: Vec<Operation> = Vec::new();
    let mut has_result = false;
    for (idx, raw) in manual.lines().enumerate() {
        let line_no = idx + 1;
        let bad = |reason: String| ToolError::MalformedManual { line: line_no, reason };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (directive, rest) = line
            .split_once(':')
            .map(|(d, r)| (d.trim(), r.trim()))
            .ok_or_else(|| bad(format!("expected `directive: value`, got {line:?}")))?;
        let Some(tool) = &tool_id else {
            if directive != "tool" {
                return Err(bad("manual must start with a `tool:` line".into()));
            }
            if rest.is_empty() {
                return Err(bad("empty tool id".into()));
            }
            tool_id = Some(rest.to_string());
            continue;
        };
        match directive {
            "tool" => return Err(bad("second `tool:` line".into())),
            "op" => {
                if rest.is_empty() || rest.contains(char::is_whitespace) {
                    return Err(bad(format!("bad operation name {rest:?}")));
                }
                if operations.iter().any(|o| o.name == rest) {
                    return Err(bad(format!("duplicate operation {rest}")));
                }
                operations.push(Operation {
                    name: rest.to_string(),
                    params: Vec::new(),
                    result_shape: OutputSpec::plain(&format!("{tool}.{rest}")),
                });
                has_result = false;
            }
            "param" => {
                let op = operations.last_mut().ok_or_else(|| bad("`param:` before any `op:`".into()))?;
                let (name, spec) = rest
                    .split_once(':')
                    .ok_or_else(|| bad("expected `param: name: type required|optional`".into()))?;
                let name = name.trim();
                let words: Vec<&str> = spec.split_whitespace().collect();
                let (semantic_type, required) = match words.as_slice() {
                    [t, "required"] => (*t, true),
                    [t, "optional"] => (*t, false),
                    [t] => (*t, true),
                    _ => return Err(bad(format!("bad parameter spec {spec:?}"))),
                };
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(bad(format!("bad parameter name {name:?}")));
                }
                if op.params.iter().any(|p| p.name == name) {
                    return Err(bad(format!("duplicate parameter {name}")));
                }
                if required && op.params.iter().any(|p| !p.required) {
                    return Err(bad(format!("required parameter {name} follows an optional one")));
                }
                op.params.push(Param {
                    name: name.to_string(),
                    semantic_type: semantic_type.to_string(),
                    required,
                });
            }
            "result" => {
                let op = operations.last_mut().ok_or_else(|| bad("`result:` before any `op:`".into()))?;
                if has_result {
                    return Err(bad(format!("second result for {}", op.name)));
                }
                op.result_shape = parse_shape(&format!("{tool}.{}", op.name), rest).map_err(bad)?;
                has_result = true;
            }
            other => return Err(bad(format!("unknown directive {other:?}"))),
        }
    }
    let tool_id = tool_id.ok_or(ToolError::MalformedManual {
        line: 1,
        reason: "manual must start with a `tool:` line".into(),
    })?;
    Ok(ToolDescriptor { tool_id, operations })
}
