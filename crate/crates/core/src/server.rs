//! HTTP API over an assembled runtime.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/goals` | `{goal, seed?}` | `{run_id, status}` |
//! | GET | `/runs/{id}` | | run view |
//! | POST | `/runs/{id}/feedback` | `{verdict, critiques, suggested_steps?}` | run view |
//! | POST | `/runs/{id}/choice` | `{node_id, option_id}` | run view |
//! | GET | `/runs/{id}/events?from=N` | | JSON array of event records |
//! | GET | `/runs/{id}/stream?from=N` | | one event record per line until the run ends |
//! | GET | `/registry` | | registry entries |
//! | POST | `/decide` | `{requirements}` | `{config, report}` |
//!
//! Errors reply `{"error": message}` with 404 for unknown runs, 409 when a
//! run is not waiting for the posted input, and 400 for malformed input.
//!
//! Runs execute on the blocking pool until they finish or suspend. With a
//! state directory every run is written to a [`RunStore`] after each
//! change, and runs not in memory are loaded from it on first access.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::orchestrator::{decide_patterns, AgentRuntime, OrchestratorError, PendingAction, RunHandle, RunStore};
use crate::reflection::HumanFeedback;

/// Events included in a run view.
pub const VIEW_EVENT_WINDOW: usize = 20;
/// Poll interval of the event stream.
pub const STREAM_POLL: Duration = Duration::from_millis(50);

type SharedRun = Arc<Mutex<RunHandle>>;

pub struct AppState {
    runtime: Arc<AgentRuntime>,
    store: Option<RunStore>,
    runs: Mutex<BTreeMap<String, SharedRun>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(runtime: AgentRuntime, store: Option<RunStore>) -> Arc<Self> {
        let next = store
            .as_ref()
            .and_then(|s| s.next_run_id().strip_prefix("run-").and_then(|n| n.parse().ok()))
            .unwrap_or(1);
        Arc::new(Self {
            runtime: Arc::new(runtime),
            store,
            runs: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(next),
        })
    }

    pub fn runtime(&self) -> &AgentRuntime {
        &self.runtime
    }

    fn lookup(&self, run_id: &str) -> Result<SharedRun, OrchestratorError> {
        let mut runs = self.runs.lock().expect("run table poisoned");
        if let Some(run) = runs.get(run_id) {
            return Ok(Arc::clone(run));
        }
        let store = self.store.as_ref().ok_or_else(|| OrchestratorError::UnknownRun(run_id.to_string()))?;
        let (state, records) = store.load(run_id)?;
        let run = Arc::new(Mutex::new(self.runtime.restore(state, records)));
        runs.insert(run_id.to_string(), Arc::clone(&run));
        Ok(run)
    }

    fn persist(&self, handle: &RunHandle) -> Result<(), OrchestratorError> {
        match &self.store {
            Some(store) => store.save(handle),
            None => Ok(()),
        }
    }
}

// ============================================================================
// Errors
// ============================================================================

pub struct ApiError(StatusCode, String);

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let code = match &e {
            OrchestratorError::UnknownRun(_) => StatusCode::NOT_FOUND,
            OrchestratorError::NotAwaiting { .. } => StatusCode::CONFLICT,
            OrchestratorError::InvalidFeedback(_)
            | OrchestratorError::InvalidChoice(_)
            | OrchestratorError::UnknownRequirement(_)
            | OrchestratorError::InvalidConfig(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1}))).into_response()
    }
}

fn join_error(e: tokio::task::JoinError) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

type ApiResult = Result<Json<Value>, ApiError>;

// ============================================================================
// Views
// ============================================================================

/// Snapshot of a run as the API reports it.
pub fn run_view(handle: &RunHandle) -> Value {
    let result = handle.result();
    let pending_action = match &result.pending {
        Some(PendingAction::Feedback { .. }) => json!("feedback"),
        Some(PendingAction::Choice { .. }) => json!("choice"),
        None => Value::Null,
    };
    let records = handle.records();
    let start = records.len().saturating_sub(VIEW_EVENT_WINDOW);
    json!({
        "run_id": result.run_id,
        "status": result.status,
        "stage": handle.state.stage,
        "goal": result.goal,
        "plan": result.final_plan,
        "tree": result.tree,
        "pending_action": pending_action,
        "pending": result.pending,
        "step_results": result.step_results,
        "final_answer": result.final_answer,
        "error": result.error,
        "usage": result.usage,
        "event_range": result.event_range,
        "latest_events": records[start..],
    })
}

// ============================================================================
// Handlers
// ============================================================================

#[derive(Debug, Deserialize)]
pub struct GoalBody {
    pub goal: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
pub struct ChoiceBody {
    pub node_id: String,
    pub option_id: String,
}

#[derive(Debug, Deserialize)]
pub struct DecideBody {
    pub requirements: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct FromQuery {
    #[serde(default)]
    pub from: Option<u64>,
}

async fn post_goal(State(app): State<Arc<AppState>>, Json(body): Json<GoalBody>) -> Result<Response, ApiError> {
    let run_id = format!("run-{}", app.next_id.fetch_add(1, Ordering::SeqCst));
    let worker = Arc::clone(&app);
    let id = run_id.clone();
    let status = tokio::task::spawn_blocking(move || {
        let handle = worker.runtime.start(&id, &body.goal, body.seed);
        worker.persist(&handle)?;
        let status = handle.state.status;
        worker
            .runs
            .lock()
            .expect("run table poisoned")
            .insert(id, Arc::new(Mutex::new(handle)));
        Ok::<_, OrchestratorError>(status)
    })
    .await
    .map_err(join_error)??;
    Ok((StatusCode::CREATED, Json(json!({"run_id": run_id, "status": status}))).into_response())
}

async fn get_run(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let run = app.lookup(&id)?;
    let view = run_view(&run.lock().expect("run poisoned"));
    Ok(Json(view))
}

/// Applies `op` to a run on the blocking pool, persists it, and replies
/// with the new view.
async fn mutate<F>(app: Arc<AppState>, id: String, op: F) -> ApiResult
where
    F: FnOnce(&AgentRuntime, &mut RunHandle) -> Result<(), OrchestratorError> + Send + 'static,
{
    let view = tokio::task::spawn_blocking(move || {
        let run = app.lookup(&id)?;
        let mut handle = run.lock().expect("run poisoned");
        op(&app.runtime, &mut handle)?;
        app.persist(&handle)?;
        Ok::<_, OrchestratorError>(run_view(&handle))
    })
    .await
    .map_err(join_error)??;
    Ok(Json(view))
}

async fn post_feedback(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<HumanFeedback>,
) -> ApiResult {
    mutate(app, id, move |rt, h| rt.post_feedback(h, body)).await
}

async fn post_choice(State(app): State<Arc<AppState>>, Path(id): Path<String>, Json(body): Json<ChoiceBody>) -> ApiResult {
    mutate(app, id, move |rt, h| rt.post_choice(h, &body.node_id, &body.option_id)).await
}

async fn get_events(State(app): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<FromQuery>) -> ApiResult {
    let run = app.lookup(&id)?;
    let records = run.lock().expect("run poisoned").log.since(q.from.unwrap_or(1));
    Ok(Json(json!(records)))
}

/// Line-delimited JSON: every event from `from` on, then new events as
/// they are appended, closing once the run reaches a terminal status.
async fn stream_events(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<FromQuery>,
) -> Result<Response, ApiError> {
    let run = app.lookup(&id)?;
    let start = q.from.unwrap_or(1);
    let stream = futures::stream::unfold((run, start, false), |(run, next, done)| async move {
        if done {
            return None;
        }
        loop {
            let (records, terminal) = {
                let h = run.lock().expect("run poisoned");
                (h.log.since(next), h.state.status.is_terminal())
            };
            if !records.is_empty() || terminal {
                let next = records.last().map(|r| r.seq + 1).unwrap_or(next);
                let mut chunk = String::new();
                for r in &records {
                    chunk.push_str(&serde_json::to_string(r).expect("records serialize"));
                    chunk.push('\n');
                }
                if chunk.is_empty() {
                    return None;
                }
                return Some((Ok::<_, std::convert::Infallible>(chunk), (run, next, terminal)));
            }
            tokio::time::sleep(STREAM_POLL).await;
        }
    });
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .body(Body::from_stream(stream))
        .expect("static response parts"))
}

async fn get_registry(State(app): State<Arc<AppState>>) -> Json<Value> {
    Json(json!(app.runtime.registry().entries()))
}

async fn post_decide(Json(body): Json<DecideBody>) -> ApiResult {
    let (config, report) = decide_patterns(&body.requirements)?;
    Ok(Json(json!({"config": config, "report": report})))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/goals", post(post_goal))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/feedback", post(post_feedback))
        .route("/runs/{id}/choice", post(post_choice))
        .route("/runs/{id}/events", get(get_events))
        .route("/runs/{id}/stream", get(stream_events))
        .route("/registry", get(get_registry))
        .route("/decide", post(post_decide))
        .with_state(state)
}

/// Serves the API on `addr` until the process exits.
pub async fn serve(addr: std::net::SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
