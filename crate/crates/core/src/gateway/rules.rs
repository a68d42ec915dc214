//! Scripted rule records and the line-oriented rule file format.
//!
//! One rule per line:
//!
//! ```text
//! # comment
//! rule_id | priority | matcher | response one ;; response two
//! ```
//!
//! Inside a field `\|` is a literal pipe, `\n` a newline and `\\` a
//! backslash. Matchers prefixed with `re:` are regular expressions; a
//! matcher containing `*` is a glob anchored at both ends of the prompt;
//! anything else is a plain substring.

use std::collections::HashSet;

use regex::Regex;

use super::GatewayError;

#[derive(Debug, Clone)]
pub enum Matcher {
    Substring(String),
    Pattern(Regex),
}

impl Matcher {
    pub fn parse(spec: &str) -> Result<Self, String> {
        if let Some(pattern) = spec.strip_prefix("re:") {
            return Regex::new(pattern)
                .map(Matcher::Pattern)
                .map_err(|e| format!("bad pattern: {e}"));
        }
        if spec.contains('*') {
            let body = spec
                .split('*')
                .map(regex::escape)
                .collect::<Vec<_>>()
                .join("(.*)");
            return Regex::new(&format!("(?s)^{body}$"))
                .map(Matcher::Pattern)
                .map_err(|e| format!("bad glob: {e}"));
        }
        if spec.is_empty() {
            return Err("empty matcher".into());
        }
        Ok(Matcher::Substring(spec.to_string()))
    }

    /// Capture groups when the matcher hits; group 0 is the whole match.
    pub(crate) fn captures(&self, prompt: &str) -> Option<Captures> {
        match self {
            Matcher::Substring(s) => prompt.contains(s.as_str()).then(|| Captures {
                numbered: vec![Some(s.clone())],
                named: Vec::new(),
            }),
            Matcher::Pattern(re) => re.captures(prompt).map(|caps| Captures {
                numbered: caps.iter().map(|m| m.map(|m| m.as_str().to_string())).collect(),
                named: re
                    .capture_names()
                    .flatten()
                    .filter_map(|n| caps.name(n).map(|m| (n.to_string(), m.as_str().to_string())))
                    .collect(),
            }),
        }
    }

    pub fn as_spec(&self) -> String {
        match self {
            Matcher::Substring(s) => s.clone(),
            Matcher::Pattern(re) => format!("re:{}", re.as_str()),
        }
    }
}

pub(crate) struct Captures {
    numbered: Vec<Option<String>>,
    named: Vec<(String, String)>,
}

impl Captures {
    pub(crate) fn get(&self, name: &str) -> Option<String> {
        if let Ok(idx) = name.parse::<usize>() {
            return self.numbered.get(idx).cloned().flatten();
        }
        self.named.iter().find(|(n, _)| n == name).map(|(_, v)| v.clone())
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedRule {
    pub rule_id: String,
    pub matcher: Matcher,
    pub responses: Vec<String>,
    pub priority: i64,
}

impl ScriptedRule {
    pub fn new(
        rule_id: impl Into<String>,
        priority: i64,
        matcher: &str,
        responses: Vec<String>,
    ) -> Result<Self, GatewayError> {
        let rule_id = rule_id.into();
        let matcher = Matcher::parse(matcher).map_err(|message| GatewayError::RulesParse {
            line: 0,
            message: format!("rule {rule_id}: {message}"),
        })?;
        if responses.is_empty() {
            return Err(GatewayError::EmptyResponses(rule_id));
        }
        Ok(Self {
            rule_id,
            matcher,
            responses,
            priority,
        })
    }
}

/// Orders rules by descending priority, then ascending rule id, and
/// rejects duplicate ids.
pub(crate) fn sort_rules(mut rules: Vec<ScriptedRule>) -> Result<Vec<ScriptedRule>, GatewayError> {
    let mut seen = HashSet::new();
    for r in &rules {
        if !seen.insert(r.rule_id.clone()) {
            return Err(GatewayError::DuplicateRule(r.rule_id.clone()));
        }
    }
    rules.sort_by(|a, b| b.priority.cmp(&a.priority).then_with(|| a.rule_id.cmp(&b.rule_id)));
    Ok(rules)
}

fn split_fields(line: &str) -> Vec<String> {
    let mut fields = vec![String::new()];
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some('|') => fields.last_mut().unwrap().push('|'),
                Some('n') => fields.last_mut().unwrap().push('\n'),
                Some('\\') => fields.last_mut().unwrap().push('\\'),
                Some(other) => {
                    let f = fields.last_mut().unwrap();
                    f.push('\\');
                    f.push(other);
                }
                None => fields.last_mut().unwrap().push('\\'),
            },
            '|' => fields.push(String::new()),
            c => fields.last_mut().unwrap().push(c),
        }
    }
    fields
}

/// Parses the rule file format.
pub fn parse_rules(source: &str) -> Result<Vec<ScriptedRule>, GatewayError> {
    let mut rules = Vec::new();
    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| GatewayError::RulesParse {
            line: line_no,
            message,
        };
        let fields = split_fields(line);
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let rule_id = fields[0].trim().to_string();
        if rule_id.is_empty() {
            return Err(err("empty rule id".into()));
        }
        let priority: i64 = fields[1]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad priority {:?}", fields[1].trim())))?;
        let matcher = Matcher::parse(fields[2].trim()).map_err(err)?;
        let responses: Vec<String> = fields[3]
            .split(";;")
            .map(|r| r.trim().to_string())
            .collect();
        if responses.iter().all(|r| r.is_empty()) {
            return Err(GatewayError::EmptyResponses(rule_id));
        }
        rules.push(ScriptedRule {
            rule_id,
            matcher,
            responses,
            priority,
        });
    }
    Ok(rules)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fields_and_escapes() {
        let src = "# fixtures\n\
                   r1 | 5 | PLAN | 1. A\\n2. B ;; 1. C\n\
                   r2 | 0 | re:a\\|b | x \\| y\n";
        let rules = parse_rules(src).unwrap();
        assert_eq!(rules.len(), 2);
        assert_eq!(rules[0].responses, vec!["1. A\n2. B", "1. C"]);
        assert_eq!(rules[0].priority, 5);
        assert!(matches!(&rules[1].matcher, Matcher::Pattern(re) if re.as_str() == "a|b"));
        assert_eq!(rules[1].responses, vec!["x | y"]);
    }

    #[test]
    fn reports_line_numbers() {
        let err = parse_rules("\n\nr1 | high | X | y").unwrap_err();
        assert!(matches!(err, GatewayError::RulesParse { line: 3, .. }));
        let err = parse_rules("r1 | 1 | X").unwrap_err();
        assert!(matches!(err, GatewayError::RulesParse { line: 1, .. }));
    }

    #[test]
    fn glob_captures() {
        let m = Matcher::parse("echo:*").unwrap();
        let caps = m.captures("echo: hi").unwrap();
        assert_eq!(caps.get("1").as_deref(), Some(" hi"));
        assert!(m.captures("say echo: hi").is_none());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let rules = parse_rules("a | 1 | X | y\na | 2 | Z | w").unwrap();
        assert!(matches!(sort_rules(rules), Err(GatewayError::DuplicateRule(id)) if id == "a"));
    }
}
