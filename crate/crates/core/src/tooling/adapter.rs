//! Converts plan steps into tool calls and tool output back into structured
//! results.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::manual::{Operation, ToolDescriptor};
use super::tools::ToolBox;
use super::ToolError;
use crate::planning::Step;
use crate::prompt::{optimise_response, StructuredResponse};
use crate::text::is_identifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub tool_id: String,
    pub operation: String,
    /// Canonical call record, `tool_id.op(name=value,...)`.
    pub call: String,
    pub raw: String,
    pub parsed: Option<StructuredResponse>,
    pub status: ToolStatus,
}

fn first_word(text: &str) -> String {
    text.split_whitespace().next().unwrap_or_default().to_lowercase()
}

/// The operation named by the step's first word, else by its capability.
pub fn select_operation<'a>(descriptor: &'a ToolDescriptor, step: &Step) -> Result<&'a Operation, ToolError> {
    let by_name = first_word(&step.description);
    descriptor
        .operation(&by_name)
        .or_else(|| step.required_capability.as_deref().and_then(|c| descriptor.operation(c)))
        .ok_or_else(|| ToolError::UnknownOperation {
            tool_id: descriptor.tool_id.clone(),
            wanted: step.required_capability.clone().unwrap_or(by_name),
        })
}

/// Reads arguments from step text. `name=value` tokens bind by name; other
/// tokens bind positionally to the remaining parameters, with any surplus
/// joined onto the last one. A leading token equal to the operation name is
/// skipped.
pub fn derive_args(op: &Operation, text: &str) -> BTreeMap<String, String> {
    let mut tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.first().is_some_and(|t| t.eq_ignore_ascii_case(&op.name)) {
        tokens.remove(0);
    }
    let mut args = BTreeMap::new();
    let mut positional = Vec::new();
    for t in tokens {
        match t.split_once('=') {
            Some((k, v)) if is_identifier(k) && !v.is_empty() => {
                args.insert(k.to_string(), v.to_string());
            }
            _ => positional.push(t),
        }
    }
    let free: Vec<&str> = op
        .params
        .iter()
        .map(|p| p.name.as_str())
        .filter(|n| !args.contains_key(*n))
        .collect();
    if free.is_empty() || positional.is_empty() {
        return args;
    }
    let fixed = free.len().min(positional.len());
    for (i, name) in free.iter().take(fixed).enumerate() {
        let value = if i + 1 == fixed {
            positional[i..].join(" ")
        } else {
            positional[i].to_string()
        };
        args.insert(name.to_string(), value);
    }
    args
}

fn validate_args(op: &Operation, args: &BTreeMap<String, String>) -> Result<(), ToolError> {
    if let Some(extra) = args.keys().find(|k| !op.params.iter().any(|p| &p.name == *k)) {
        return Err(ToolError::UnknownParam(extra.clone()));
    }
    for p in &op.params {
        match args.get(&p.name) {
            None if p.required => return Err(ToolError::MissingParam(p.name.clone())),
            Some(v) if p.semantic_type == "number" && v.trim().parse::<f64>().is_err() => {
                return Err(ToolError::InvalidArgument {
                    name: p.name.clone(),
                    reason: format!("{v:?} is not a number"),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn call_record(tool_id: &str, op: &Operation, args: &BTreeMap<String, String>) -> String {
    let rendered: Vec<String> = op
        .params
        .iter()
        .filter_map(|p| args.get(&p.name).map(|v| format!("{}={}", p.name, v)))
        .collect();
    format!("{tool_id}.{}({})", op.name, rendered.join(","))
}

/// Validates `args`, invokes the bound tool and parses its output against
/// the operation's result shape. A result that does not parse comes back
/// with status `failed` and the raw text preserved.
pub fn adapt_invoke(
    descriptor: &ToolDescriptor,
    step: &Step,
    args: &BTreeMap<String, String>,
    toolbox: &ToolBox,
) -> Result<ToolResult, ToolError> {
    let op = select_operation(descriptor, step)?;
    validate_args(op, args)?;
    let call = call_record(&descriptor.tool_id, op, args);
    let tool = toolbox
        .get(&descriptor.tool_id)
        .ok_or_else(|| ToolError::UnknownTool(descriptor.tool_id.clone()))?;
    let raw = tool.invoke(&op.name, args).map_err(ToolError::ToolFailure)?;
    let (parsed, status) = match optimise_response(&raw, &op.result_shape) {
        Ok(p) => (Some(p), ToolStatus::Ok),
        Err(_) => (None, ToolStatus::Failed),
    };
    Ok(ToolResult {
        tool_id: descriptor.tool_id.clone(),
        operation: op.name.clone(),
        call,
        raw,
        parsed,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planning::{Plan, StepSpec};
    use crate::tooling::manual::learn_interface;
    use crate::tooling::tools::{Calculator, LocalTool};
    use std::sync::Arc;

    fn step(text: &str, cap: Option<&str>) -> Step {
        Plan::linear("p", "g", &[StepSpec::new(text, cap)]).steps.remove(0)
    }

    fn calc() -> (ToolDescriptor, ToolBox) {
        let mut tb = ToolBox::new();
        tb.bind(Arc::new(Calculator));
        (learn_interface(&Calculator.manual()).unwrap(), tb)
    }

    fn args(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn add_round_trip() {
        let (d, tb) = calc();
        let s = step("add 2 3", Some("math"));
        let r = adapt_invoke(&d, &s, &args(&[("a", "2"), ("b", "3")]), &tb).unwrap();
        assert_eq!(r.status, ToolStatus::Ok);
        assert_eq!(r.call, "calculator.add(a=2,b=3)");
        assert_eq!(
            r.parsed,
            Some(StructuredResponse::KeyValue(BTreeMap::from([("sum".into(), "5".into())])))
        );
        assert_eq!(derive_args(d.operation("add").unwrap(), &s.description), args(&[("a", "2"), ("b", "3")]));
    }

    #[test]
    fn argument_errors() {
        let (d, tb) = calc();
        let s = step("add", None);
        assert_eq!(
            adapt_invoke(&d, &s, &args(&[("a", "2")]), &tb),
            Err(ToolError::MissingParam("b".into()))
        );
        assert_eq!(
            adapt_invoke(&d, &s, &args(&[("a", "2"), ("b", "3"), ("c", "4")]), &tb),
            Err(ToolError::UnknownParam("c".into()))
        );
        assert!(matches!(
            adapt_invoke(&d, &step("div 1 0", None), &args(&[("a", "1"), ("b", "0")]), &tb),
            Err(ToolError::ToolFailure(_))
        ));
        assert!(matches!(
            adapt_invoke(&d, &step("integrate x", Some("calculus")), &BTreeMap::new(), &tb),
            Err(ToolError::UnknownOperation { .. })
        ));
    }

    #[test]
    fn derive_positional_and_named() {
        let (d, _) = calc();
        let eval = d.operation("eval").unwrap();
        assert_eq!(derive_args(eval, "eval 2 + 3"), args(&[("expr", "2 + 3")]));
        let add = d.operation("add").unwrap();
        assert_eq!(derive_args(add, "add b=4 1"), args(&[("a", "1"), ("b", "4")]));
    }
}
