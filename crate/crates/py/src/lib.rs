//! Python bindings for the agora runtime.
//!
//! Structured results cross the boundary as plain Python objects (dicts,
//! lists, strings and numbers) built from the JSON the core types
//! serialize to.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde_json::Value;

use agora::audit::{read_jsonl, verify_log_with_head, EventRecord};
use agora::cooperation::{Ballot, VoteMethod};
use agora::guardrails::GuardModality;
use agora::memory::Document;
use agora::orchestrator::{AgentRuntime, OrchestratorError, PatternConfig, RunHandle};
use agora::reflection::HumanFeedback;

fn to_py(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn orchestrator_err(e: OrchestratorError) -> PyErr {
    match e {
        OrchestratorError::UnknownRun(_) => PyKeyError::new_err(e.to_string()),
        OrchestratorError::Store(_) | OrchestratorError::NotAwaiting { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

// ============================================================================
// Free functions
// ============================================================================

/// Maps requirement tags to `{"config": ..., "report": ...}`.
#[pyfunction]
fn decide_patterns(py: Python<'_>, requirements: Vec<String>) -> PyResult<Py<PyAny>> {
    let (config, report) = agora::orchestrator::decide_patterns(&requirements).map_err(orchestrator_err)?;
    to_py(py, &serde_json::json!({"config": config, "report": report}))
}

/// The 64-dimensional hashed bag-of-words embedding of `text`.
#[pyfunction]
fn embed(text: &str) -> Vec<f64> {
    agora::memory::embed(text).0
}

/// Counts `(voter_id, choice_id, weight)` ballots with `method`
/// (`"head_count"` or `"weighted"`).
#[pyfunction]
fn tally(py: Python<'_>, method: &str, candidates: Vec<String>, ballots: Vec<(String, String, f64)>) -> PyResult<Py<PyAny>> {
    let method: VoteMethod = serde_json::from_value(Value::String(method.into())).map_err(value_err)?;
    let ballots: Vec<Ballot> = ballots
        .into_iter()
        .enumerate()
        .map(|(i, (voter_id, choice_id, weight_applied))| Ballot {
            voter_id,
            choice_id,
            weight_applied,
            scores: Default::default(),
            seq: i as u64 + 1,
        })
        .collect();
    let result = agora::cooperation::tally(method, &candidates, &ballots).map_err(value_err)?;
    to_py(py, &result)
}

fn verdict(py: Python<'_>, records: &[EventRecord], head: Option<&str>) -> PyResult<Py<PyAny>> {
    let v = match head {
        Some(h) => verify_log_with_head(records, h),
        None => agora::audit::verify_log(records),
    };
    to_py(py, &v)
}

/// Verifies a JSON-lines event log file, optionally against a head digest.
#[pyfunction]
#[pyo3(signature = (path, head=None))]
fn verify_log(py: Python<'_>, path: PathBuf, head: Option<&str>) -> PyResult<Py<PyAny>> {
    let records = read_jsonl(&path).map_err(value_err)?;
    verdict(py, &records, head)
}

/// Verifies event records given as dicts.
#[pyfunction]
#[pyo3(signature = (records, head=None))]
fn verify_records(py: Python<'_>, records: &Bound<'_, PyAny>, head: Option<&str>) -> PyResult<Py<PyAny>> {
    let records: Vec<EventRecord> = from_py(py, records)?;
    verdict(py, &records, head)
}

// ============================================================================
// Classes
// ============================================================================

#[pyclass(name = "KnowledgeBase")]
#[derive(Default)]
struct PyKnowledgeBase {
    inner: agora::memory::KnowledgeBase,
}

#[pymethods]
impl PyKnowledgeBase {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    #[pyo3(signature = (doc_id, text, tags=None))]
    fn index(&mut self, doc_id: String, text: String, tags: Option<Vec<String>>) -> PyResult<String> {
        let doc = Document::new(doc_id, text).with_tags(tags.unwrap_or_default());
        self.inner.index(doc).map_err(value_err)
    }

    /// Top `k` `(doc_id, similarity)` pairs; with `tags`, only documents
    /// carrying all of them.
    #[pyo3(signature = (query, k, tags=None))]
    fn retrieve(&self, query: &str, k: usize, tags: Option<Vec<String>>) -> Vec<(String, f64)> {
        let filter: Option<BTreeSet<String>> = tags.map(|t| t.into_iter().collect());
        self.inner
            .retrieve(query, k, filter.as_ref())
            .into_iter()
            .map(|r| (r.doc_id, r.similarity))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "GuardPipeline")]
struct PyGuardPipeline {
    inner: agora::guardrails::GuardPipeline,
}

#[pymethods]
impl PyGuardPipeline {
    /// Builds a pipeline from its JSON rule list; with no argument, the
    /// bundled default rules.
    #[new]
    #[pyo3(signature = (rules_json=None))]
    fn new(rules_json: Option<&str>) -> PyResult<Self> {
        let source = rules_json.unwrap_or(agora::orchestrator::runtime::DEFAULT_GUARDRAILS);
        let inner = agora::guardrails::GuardPipeline::from_json(source).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn check_input(&self, py: Python<'_>, content: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.check_input(content, GuardModality::Text))
    }

    fn check_output(&self, py: Python<'_>, content: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.check_output(content, GuardModality::Text))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// An assembled agent. `config_json` is a pattern config document (the
/// baseline when omitted); relative paths in it resolve against `base_dir`.
#[pyclass(name = "Runtime")]
struct PyRuntime {
    inner: Arc<AgentRuntime>,
    next_run: u64,
}

#[pymethods]
impl PyRuntime {
    #[new]
    #[pyo3(signature = (config_json=None, base_dir=None))]
    fn new(config_json: Option<&str>, base_dir: Option<PathBuf>) -> PyResult<Self> {
        let config = match config_json {
            Some(src) => PatternConfig::from_json(src).map_err(orchestrator_err)?,
            None => PatternConfig::baseline(),
        };
        let base = base_dir.unwrap_or_else(|| PathBuf::from("."));
        let inner = agora::orchestrator::assemble(config, &base).map_err(orchestrator_err)?;
        Ok(Self {
            inner: Arc::new(inner),
            next_run: 1,
        })
    }

    #[getter]
    fn active_patterns(&self) -> Vec<String> {
        self.inner.active_patterns().into_iter().collect()
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.config())
    }

    /// Starts a run; it proceeds until it completes, fails or waits for a
    /// person.
    #[pyo3(signature = (goal, seed=0))]
    fn run(&mut self, py: Python<'_>, goal: String, seed: u64) -> PyRun {
        let run_id = format!("run-{}", self.next_run);
        self.next_run += 1;
        let rt = Arc::clone(&self.inner);
        let handle = py.detach(move || rt.start(&run_id, &goal, seed));
        PyRun {
            runtime: Arc::clone(&self.inner),
            handle,
        }
    }
}

#[pyclass(name = "Run")]
struct PyRun {
    runtime: Arc<AgentRuntime>,
    handle: RunHandle,
}

#[pymethods]
impl PyRun {
    #[getter]
    fn run_id(&self) -> String {
        self.handle.state.run_id.clone()
    }

    /// One of `running`, `complete`, `failed`, `awaiting_human`, `aborted`.
    #[getter]
    fn status(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.handle.state.status)
    }

    #[getter]
    fn final_answer(&self) -> Option<String> {
        self.handle.state.final_answer.clone()
    }

    #[getter]
    fn pending(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.handle.state.pending)
    }

    fn result(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.handle.result())
    }

    fn events(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.handle.records())
    }

    fn model_calls(&self) -> usize {
        self.handle.model_calls()
    }

    /// Posts `{"verdict": "approve"|"revise", "critiques": [...],
    /// "suggested_steps": [...]}` to a run waiting for feedback.
    fn post_feedback(&mut self, py: Python<'_>, feedback: &Bound<'_, PyAny>) -> PyResult<()> {
        let feedback: HumanFeedback = from_py(py, feedback)?;
        self.runtime.post_feedback(&mut self.handle, feedback).map_err(orchestrator_err)
    }

    fn post_choice(&mut self, node_id: &str, option_id: &str) -> PyResult<()> {
        self.runtime
            .post_choice(&mut self.handle, node_id, option_id)
            .map_err(orchestrator_err)
    }

    /// Counts one tick of waiting without an answer.
    fn poll(&mut self) {
        self.runtime.poll(&mut self.handle);
    }
}

#[pymodule]
pub fn agora_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(decide_patterns, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(tally, m)?)?;
    m.add_function(wrap_pyfunction!(verify_log, m)?)?;
    m.add_function(wrap_pyfunction!(verify_records, m)?)?;
    m.add_class::<PyKnowledgeBase>()?;
    m.add_class::<PyGuardPipeline>()?;
    m.add_class::<PyRuntime>()?;
    m.add_class::<PyRun>()?;
    Ok(())
}
