//! Bundled local tools that the adapter can bind to.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};

use crate::memory::KnowledgeBase;
use crate::text::format_number;

/// A callable tool implementation. Returns the raw textual result, or the
/// raw failure text.
pub trait LocalTool: Send + Sync {
    fn tool_id(&self) -> &str;

    /// Manual in the sectioned text format.
    fn manual(&self) -> String;

    fn invoke(&self, operation: &str, args: &BTreeMap<String, String>) -> Result<String, String>;
}

fn arg<'a>(args: &'a BTreeMap<String, String>, name: &str) -> Result<&'a str, String> {
    args.get(name).map(String::as_str).ok_or_else(|| format!("missing {name}"))
}

fn number(args: &BTreeMap<String, String>, name: &str) -> Result<f64, String> {
    let raw = arg(args, name)?;
    raw.trim().parse().map_err(|_| format!("{name}={raw} is not a number"))
}

// ============================================================================
// Calculator
// ============================================================================

pub struct Calculator;

impl LocalTool for Calculator {
    fn tool_id(&self) -> &str {
        "calculator"
    }

    fn manual(&self) -> String {
        let mut m = String::from("tool: calculator\n");
        for (op, key) in [("add", "sum"), ("sub", "difference"), ("mul", "product"), ("div", "quotient")] {
            m.push_str(&format!(
                "op: {op}\nparam: a: number required\nparam: b: number required\nresult: key_value{{{key}}}\n"
            ));
        }
        m.push_str("op: eval\nparam: expr: expression required\nresult: key_value{result}\n");
        m
    }

    fn invoke(&self, operation: &str, args: &BTreeMap<String, String>) -> Result<String, String> {
        let binary = |key: &str, f: fn(f64, f64) -> Result<f64, String>| -> Result<String, String> {
            let value = f(number(args, "a")?, number(args, "b")?)?;
            Ok(format!("{key}: {}", format_number(value)))
        };
        match operation {
            "add" => binary("sum", |a, b| Ok(a + b)),
            "sub" => binary("difference", |a, b| Ok(a - b)),
            "mul" => binary("product", |a, b| Ok(a * b)),
            "div" => binary("quotient", |a, b| if b == 0.0 { Err("division by zero".into()) } else { Ok(a / b) }),
            "eval" => Ok(format!("result: {}", format_number(eval_expression(arg(args, "expr")?)?))),
            other => Err(format!("unknown operation {other}")),
        }
    }
}

/// Evaluates `+ - * /` arithmetic with parentheses and unary minus.
pub fn eval_expression(src: &str) -> Result<f64, String> {
    let tokens = lex(src)?;
    let mut parser = Parser { tokens, pos: 0 };
    let value = parser.expr()?;
    if parser.pos != parser.tokens.len() {
        return Err(format!("unexpected token in {src:?}"));
    }
    if !value.is_finite() {
        return Err("result is not finite".into());
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Op(char),
}

fn lex(src: &str) -> Result<Vec<Tok>, String> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            out.push(Tok::Num(text.parse().map_err(|_| format!("bad number {text}"))?));
        } else if "+-*/()".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(format!("unexpected character {c:?}"));
        }
    }
    if out.is_empty() {
        return Err("empty expression".into());
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn expr(&mut self) -> Result<f64, String> {
        let mut value = self.term()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            value = if op == '+' { value + rhs } else { value - rhs };
        }
        Ok(value)
    }

    fn term(&mut self) -> Result<f64, String> {
        let mut value = self.factor()?;
        while let Some(Tok::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.factor()?;
            if op == '/' && rhs == 0.0 {
                return Err("division by zero".into());
            }
            value = if op == '*' { value * rhs } else { value / rhs };
        }
        Ok(value)
    }

    fn factor(&mut self) -> Result<f64, String> {
        match self.peek().cloned() {
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Ok(n)
            }
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(-self.factor()?)
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let v = self.expr()?;
                if self.peek() != Some(&Tok::Op(')')) {
                    return Err("missing ')'".into());
                }
                self.pos += 1;
                Ok(v)
            }
            other => Err(format!("unexpected {other:?}")),
        }
    }
}

// ============================================================================
// Keyword search over the knowledge base
// ============================================================================

/// Ranks documents by the number of distinct query words they contain
/// (casefolded), ties by `doc_id`; documents sharing no word are skipped.
pub struct KeywordSearch {
    corpus: Arc<RwLock<KnowledgeBase>>,
}

impl KeywordSearch {
    pub fn new(corpus: Arc<RwLock<KnowledgeBase>>) -> Self {
        Self { corpus }
    }

    pub fn search(&self, query: &str, k: usize) -> Vec<(String, String)> {
        let words: BTreeSet<String> = query.split_whitespace().map(str::to_lowercase).collect();
        let kb = self.corpus.read().expect("corpus poisoned");
        let mut hits: Vec<(usize, String, String)> = kb
            .documents()
            .map(|d| {
                let doc_words: BTreeSet<String> = d.text.split_whitespace().map(str::to_lowercase).collect();
                (words.intersection(&doc_words).count(), d.doc_id.clone(), d.text.clone())
            })
            .filter(|(n, _, _)| *n > 0)
            .collect();
        hits.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        hits.into_iter().take(k).map(|(_, id, text)| (id, text)).collect()
    }
}

impl LocalTool for KeywordSearch {
    fn tool_id(&self) -> &str {
        "search"
    }

    fn manual(&self) -> String {
        "tool: search\nop: search\nparam: query: text required\nparam: k: number optional\nresult: enumerated_list\n".into()
    }

    fn invoke(&self, operation: &str, args: &BTreeMap<String, String>) -> Result<String, String> {
        if operation != "search" {
            return Err(format!("unknown operation {operation}"));
        }
        let k = match args.get("k") {
            Some(_) => number(args, "k")? as usize,
            None => 3,
        };
        let hits = self.search(arg(args, "query")?, k);
        if hits.is_empty() {
            return Ok("1. no results".into());
        }
        Ok(hits
            .iter()
            .enumerate()
            .map(|(i, (id, text))| format!("{}. {id}: {text}", i + 1))
            .collect::<Vec<_>>()
            .join("\n"))
    }
}

// ============================================================================
// Echo
// ============================================================================

pub struct Echo;

impl LocalTool for Echo {
    fn tool_id(&self) -> &str {
        "echo"
    }

    fn manual(&self) -> String {
        "tool: echo\nop: echo\nparam: text: text required\nresult: plain\n".into()
    }

    fn invoke(&self, operation: &str, args: &BTreeMap<String, String>) -> Result<String, String> {
        match operation {
            "echo" => Ok(arg(args, "text")?.to_string()),
            other => Err(format!("unknown operation {other}")),
        }
    }
}

/// Local implementations keyed by tool id.
#[derive(Clone, Default)]
pub struct ToolBox {
    tools: BTreeMap<String, Arc<dyn LocalTool>>,
}

impl std::fmt::Debug for ToolBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.tools.keys()).finish()
    }
}

impl ToolBox {
    pub fn new() -> Self {
        Self::default()
    }

    /// Calculator, keyword search over `corpus`, and echo.
    pub fn bundled(corpus: Arc<RwLock<KnowledgeBase>>) -> Self {
        let mut tb = Self::new();
        tb.bind(Arc::new(Calculator));
        tb.bind(Arc::new(KeywordSearch::new(corpus)));
        tb.bind(Arc::new(Echo));
        tb
    }

    pub fn bind(&mut self, tool: Arc<dyn LocalTool>) {
        self.tools.insert(tool.tool_id().to_string(), tool);
    }

    pub fn get(&self, tool_id: &str) -> Option<&Arc<dyn LocalTool>> {
        self.tools.get(tool_id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.tools.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Document;

    #[test]
    fn expressions() {
        assert_eq!(eval_expression("2+3").unwrap(), 5.0);
        assert_eq!(eval_expression("2 + 3 * 4").unwrap(), 14.0);
        assert_eq!(eval_expression("(2+3)*4").unwrap(), 20.0);
        assert_eq!(eval_expression("-3 + 1").unwrap(), -2.0);
        assert_eq!(eval_expression("7/2").unwrap(), 3.5);
        assert!(eval_expression("1/0").is_err());
        assert!(eval_expression("2+").is_err());
        assert!(eval_expression("x").is_err());
    }

    #[test]
    fn calculator_ops() {
        let args = BTreeMap::from([("a".to_string(), "2".to_string()), ("b".to_string(), "3".to_string())]);
        assert_eq!(Calculator.invoke("add", &args).unwrap(), "sum: 5");
        assert_eq!(Calculator.invoke("div", &args).unwrap(), "quotient: 0.6666666666666666");
        let zero = BTreeMap::from([("a".to_string(), "2".to_string()), ("b".to_string(), "0".to_string())]);
        assert!(Calculator.invoke("div", &zero).is_err());
    }

    #[test]
    fn keyword_search() {
        let mut kb = KnowledgeBase::new();
        kb.index(Document::new("d1", "tea needs hot water")).unwrap();
        kb.index(Document::new("d2", "coffee needs hot water and beans")).unwrap();
        kb.index(Document::new("d3", "unrelated")).unwrap();
        let s = KeywordSearch::new(Arc::new(RwLock::new(kb)));
        let hits: Vec<_> = s.search("hot tea", 5).into_iter().map(|h| h.0).collect();
        assert_eq!(hits, ["d1", "d2"]);
    }
}
