//! Scenario-based agent evaluation.
//!
//! A suite is a list of cases, each naming a goal text, an expected value
//! and a mechanical metric. Cases run through a [`CaseRunner`] with a seed
//! derived from the case id, so evaluating the same suite twice yields the
//! same report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::text::{fill_slots, slots, stable_seed};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("thresholds must satisfy 0 <= near_miss ({near_miss}) <= pass ({pass}) <= 1")]
    ThresholdOrder { pass: f64, near_miss: f64 },
    #[error("duplicate case id {0}")]
    DuplicateCase(String),
    #[error("grid parameter {0} has no values")]
    EmptyGridValues(String),
    #[error("grid parameter {0} does not appear in the template")]
    UnknownSlot(String),
    #[error("template slot {0} has no grid values")]
    UnboundSlot(String),
    #[error("metric {metric_id}: {reason}")]
    InvalidMetric { metric_id: String, reason: String },
    #[error("agent assembly failed: {0}")]
    AgentAssemblyFailure(String),
    #[error("suite file: {0}")]
    SuiteFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    ExactMatch,
    Contains,
    NumericTolerance,
    StepCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub metric_id: String,
    pub kind: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_count: Option<usize>,
}

impl Metric {
    pub fn exact() -> Self {
        Self::of(MetricKind::ExactMatch)
    }

    pub fn contains() -> Self {
        Self::of(MetricKind::Contains)
    }

    pub fn numeric(tolerance: f64) -> Self {
        Self {
            tolerance: Some(tolerance),
            ..Self::of(MetricKind::NumericTolerance)
        }
    }

    pub fn step_count(target: usize) -> Self {
        Self {
            target_count: Some(target),
            ..Self::of(MetricKind::StepCount)
        }
    }

    fn of(kind: MetricKind) -> Self {
        let metric_id = serde_json::to_value(kind)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        Self {
            metric_id,
            kind,
            tolerance: None,
            target_count: None,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |reason: &str| EvalError::InvalidMetric {
            metric_id: self.metric_id.clone(),
            reason: reason.into(),
        };
        match self.kind {
            MetricKind::NumericTolerance => match self.tolerance {
                Some(t) if t >= 0.0 && t.is_finite() => Ok(()),
                _ => Err(bad("numeric_tolerance needs tolerance >= 0")),
            },
            MetricKind::StepCount if self.target_count.is_none() => Err(bad("step_count needs target_count")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub case_id: String,
    #[serde(default)]
    pub scenario: String,
    pub input: String,
    /// Optional path to a detector-event fixture for proactive goal creation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detectors: Option<String>,
    pub expected: Value,
    pub metric: Metric,
}

impl EvalCase {
    pub fn new(case_id: &str, input: &str, expected: Value, metric: Metric) -> Self {
        Self {
            case_id: case_id.into(),
            scenario: String::new(),
            input: input.into(),
            detectors: None,
            expected,
            metric,
        }
    }

    pub fn expected_text(&self) -> String {
        match &self.expected {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }

    pub fn seed(&self) -> u64 {
        stable_seed(&self.case_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub suite_id: String,
    pub cases: Vec<EvalCase>,
    pub pass_threshold: f64,
    pub near_miss_threshold: f64,
}

pub const DEFAULT_NEAR_MISS_FRACTION: f64 = 0.5;

/// Validates thresholds and case ids. A missing near-miss threshold
/// defaults to half the pass threshold.
pub fn define_suite(
    suite_id: &str,
    cases: Vec<EvalCase>,
    pass_threshold: f64,
    near_miss_threshold: Option<f64>,
) -> Result<Suite, EvalError> {
    let near_miss = near_miss_threshold.unwrap_or(pass_threshold * DEFAULT_NEAR_MISS_FRACTION);
    if !(0.0 <= near_miss && near_miss <= pass_threshold && pass_threshold <= 1.0) {
        return Err(EvalError::ThresholdOrder {
            pass: pass_threshold,
            near_miss,
        });
    }
    let mut seen = BTreeSet::new();
    for c in &cases {
        if !seen.insert(c.case_id.as_str()) {
            return Err(EvalError::DuplicateCase(c.case_id.clone()));
        }
        c.metric.validate()?;
    }
    Ok(Suite {
        suite_id: suite_id.into(),
        cases,
        pass_threshold,
        near_miss_threshold: near_miss,
    })
}

/// Expands `template` over the Cartesian product of `grid`. Keys are taken
/// in sorted order and the last key varies fastest; each case id gets a
/// `[k=v,...]` suffix.
pub fn generate_cases(template: &EvalCase, grid: &BTreeMap<String, Vec<String>>) -> Result<Vec<EvalCase>, EvalError> {
    let expected_text = template.expected.as_str().unwrap_or("");
    let used: BTreeSet<String> = slots(&template.input).into_iter().chain(slots(expected_text)).collect();
    for (k, values) in grid {
        if values.is_empty() {
            return Err(EvalError::EmptyGridValues(k.clone()));
        }
        if !used.contains(k) {
            return Err(EvalError::UnknownSlot(k.clone()));
        }
    }
    if let Some(unbound) = used.iter().find(|s| !grid.contains_key(*s)) {
        return Err(EvalError::UnboundSlot(unbound.clone()));
    }
    let keys: Vec<&String> = grid.keys().collect();
    let mut combos: Vec<Vec<&String>> = vec![Vec::new()];
    for k in &keys {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                grid[*k].iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push(v);
                    next
                })
            })
            .collect();
    }
    Ok(combos
        .into_iter()
        .map(|values| {
            let binding: BTreeMap<&str, &str> = keys.iter().map(|k| k.as_str()).zip(values.iter().map(|v| v.as_str())).collect();
            let lookup = |name: &str| binding.get(name).map(|v| v.to_string());
            let suffix = binding.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",");
            let mut case = template.clone();
            case.case_id = format!("{}[{suffix}]", template.case_id);
            case.input = fill_slots(&template.input, lookup);
            if let Value::String(e) = &template.expected {
                case.expected = Value::String(fill_slots(e, lookup));
            }
            case
        })
        .collect())
}

/// What a case run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutput {
    pub answer: String,
    pub plan_steps: usize,
}

/// Runs one case in a fresh agent.
pub trait CaseRunner: Sync {
    fn run_case(&self, case: &EvalCase, seed: u64) -> Result<CaseOutput, String>;
}

impl<F> CaseRunner for F
where
    F: Fn(&EvalCase, u64) -> Result<CaseOutput, String> + Sync,
{
    fn run_case(&self, case: &EvalCase, seed: u64) -> Result<CaseOutput, String> {
        self(case, seed)
    }
}

/// Applies `metric`; every metric scores 0 or 1.
pub fn score(metric: &Metric, expected: &str, output: &CaseOutput) -> f64 {
    let hit = match metric.kind {
        MetricKind::ExactMatch => output.answer.trim() == expected.trim(),
        MetricKind::Contains => output.answer.contains(expected.trim()),
        MetricKind::NumericTolerance => {
            match (output.answer.trim().parse::<f64>(), expected.trim().parse::<f64>()) {
                (Ok(a), Ok(e)) => (a - e).abs() <= metric.tolerance.unwrap_or(0.0),
                _ => false,
            }
        }
        MetricKind::StepCount => Some(output.plan_steps) == metric.target_count,
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub score: f64,
    pub passed: bool,
    pub near_miss: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite_id: String,
    pub per_case: BTreeMap<String, CaseReport>,
    pub aggregate: f64,
    pub pass_rate: f64,
}

/// Builds a report from per-case scores (and optional failure notes).
pub fn assemble_report(suite: &Suite, results: BTreeMap<String, (f64, Option<String>, Option<String>)>) -> EvalReport {
    let per_case: BTreeMap<String, CaseReport> = results
        .into_iter()
        .map(|(id, (score, actual, failure))| {
            let passed = score >= suite.pass_threshold;
            let near_miss = !passed && score >= suite.near_miss_threshold;
            (
                id,
                CaseReport {
                    score,
                    passed,
                    near_miss,
                    actual,
                    failure,
                },
            )
        })
        .collect();
    let n = per_case.len().max(1) as f64;
    let aggregate = per_case.values().map(|c| c.score).sum::<f64>() / n;
    let pass_rate = per_case.values().filter(|c| c.passed).count() as f64 / n;
    EvalReport {
        suite_id: suite.suite_id.clone(),
        per_case,
        aggregate,
        pass_rate,
    }
}

/// Runs every case concurrently; a failing case scores 0 with its reason
/// recorded and never affects the others.
pub fn evaluate(runner: &dyn CaseRunner, suite: &Suite) -> EvalReport {
    let outcomes: Vec<(String, Result<CaseOutput, String>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = suite
            .cases
            .iter()
            .map(|case| scope.spawn(move || (case.case_id.clone(), runner.run_case(case, case.seed()))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| (String::new(), Err("case runner panicked".into()))))
            .collect()
    });
    let mut results = BTreeMap::new();
    for (case, (id, outcome)) in suite.cases.iter().zip(outcomes) {
        let id = if id.is_empty() { case.case_id.clone() } else { id };
        let entry = match outcome {
            Ok(out) => (score(&case.metric, &case.expected_text(), &out), Some(out.answer), None),
            Err(reason) => (0.0, None, Some(reason)),
        };
        results.insert(id, entry);
    }
    assemble_report(suite, results)
}

/// Plain-text table: one row per case, then the aggregates.
pub fn render_summary(report: &EvalReport) -> String {
    let width = report.per_case.keys().map(|k| k.len()).max().unwrap_or(4).max(4);
    let mut out = format!("suite {}\n{:<width$}  score  result\n", report.suite_id, "case");
    for (id, c) in &report.per_case {
        let result = if c.passed {
            "pass"
        } else if c.near_miss {
            "near-miss"
        } else {
            "fail"
        };
        out.push_str(&format!("{id:<width$}  {:.3}  {result}", c.score));
        if let Some(f) = &c.failure {
            out.push_str(&format!("  ({f})"));
        }
        out.push('\n');
    }
    out.push_str(&format!(
        "aggregate {:.3}  pass_rate {:.3}\n",
        report.aggregate, report.pass_rate
    ));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseTemplate {
    pub template: EvalCase,
    pub grid: BTreeMap<String, Vec<String>>,
}

/// Suite file layout: explicit cases plus optional templated expansions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteFile {
    pub suite_id: String,
    pub pass_threshold: f64,
    #[serde(default)]
    pub near_miss_threshold: Option<f64>,
    #[serde(default)]
    pub cases: Vec<EvalCase>,
    #[serde(default)]
    pub templates: Vec<CaseTemplate>,
}

impl SuiteFile {
    pub fn into_suite(self) -> Result<Suite, EvalError> {
        let mut cases = self.cases;
        for t in &self.templates {
            cases.extend(generate_cases(&t.template, &t.grid)?);
        }
        define_suite(&self.suite_id, cases, self.pass_threshold, self.near_miss_threshold)
    }
}

pub fn load_suite(path: &Path) -> Result<Suite, EvalError> {
    let source = std::fs::read_to_string(path).map_err(|e| EvalError::SuiteFile(format!("{}: {e}", path.display())))?;
    let file: SuiteFile =
        serde_json::from_str(&source).map_err(|e| EvalError::SuiteFile(format!("{}: {e}", path.display())))?;
    file.into_suite()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn case(id: &str) -> EvalCase {
        EvalCase::new(id, "compute: 2+3", json!("5"), Metric::exact())
    }

    #[test]
    fn suite_definition() {
        assert_eq!(define_suite("s", vec![case("a"), case("b"), case("c")], 1.0, None).unwrap().cases.len(), 3);
        assert!(matches!(
            define_suite("s", vec![case("a")], 0.5, Some(0.6)),
            Err(EvalError::ThresholdOrder { .. })
        ));
        assert_eq!(
            define_suite("s", vec![case("a"), case("a")], 1.0, None),
            Err(EvalError::DuplicateCase("a".into()))
        );
        assert_eq!(define_suite("s", vec![], 0.8, None).unwrap().near_miss_threshold, 0.4);
    }

    #[test]
    fn grid_expansion() {
        let t = EvalCase::new("t", "add {x} and {y}", json!("{x}"), Metric::exact());
        let grid = BTreeMap::from([("x".to_string(), vec!["1".into(), "2".into()]), ("y".to_string(), vec!["a".into()])]);
        let cases = generate_cases(&t, &grid).unwrap();
        let ids: Vec<_> = cases.iter().map(|c| c.case_id.as_str()).collect();
        assert_eq!(ids, ["t[x=1,y=a]", "t[x=2,y=a]"]);
        assert_eq!(cases[1].input, "add 2 and a");
        assert_eq!(cases[1].expected, json!("2"));

        let empty = BTreeMap::from([("x".to_string(), vec![]), ("y".to_string(), vec!["a".into()])]);
        assert_eq!(generate_cases(&t, &empty), Err(EvalError::EmptyGridValues("x".into())));
        let t1 = EvalCase::new("t", "n={x}", json!("1"), Metric::exact());
        let three = BTreeMap::from([("x".to_string(), vec!["1".into(), "2".into(), "3".into()])]);
        assert_eq!(generate_cases(&t1, &three).unwrap().len(), 3);
    }

    #[test]
    fn metrics() {
        let out = |a: &str| CaseOutput { answer: a.into(), plan_steps: 2 };
        assert_eq!(score(&Metric::exact(), "5", &out("5")), 1.0);
        assert_eq!(score(&Metric::numeric(0.1), "5", &out("5.05")), 1.0);
        assert_eq!(score(&Metric::numeric(0.01), "5", &out("5.05")), 0.0);
        assert_eq!(score(&Metric::contains(), "lo w", &out("hello world")), 1.0);
        assert_eq!(score(&Metric::step_count(2), "", &out("x")), 1.0);
    }

    #[test]
    fn evaluation_and_isolation() {
        let cases = vec![case("a"), case("b"), case("c"), case("d")];
        let suite = define_suite("s", cases, 1.0, None).unwrap();
        let runner = |c: &EvalCase, _seed: u64| match c.case_id.as_str() {
            "a" | "b" => Ok(CaseOutput { answer: "5".into(), plan_steps: 1 }),
            "c" => Ok(CaseOutput { answer: "6".into(), plan_steps: 1 }),
            _ => Err("boom".to_string()),
        };
        let report = evaluate(&runner, &suite);
        assert_eq!(report.aggregate, 0.5);
        assert_eq!(report.pass_rate, 0.5);
        assert_eq!(report.per_case["d"].failure.as_deref(), Some("boom"));
        assert_eq!(evaluate(&runner, &suite), report);
        assert!(render_summary(&report).contains("pass_rate 0.500"));
    }
}
