//! REST surface over the executor, campaigns and the record store. Every
//! GET is computed from the record chains, so the API holds no state of
//! its own beyond live-run handles.

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;
use tracing::{info, warn};

use crate::campaign::{
    campaign_report, parse_campaign_config, run_campaign, AbortFlag, CampaignError,
    CAMPAIGN_COMPLETED,
};
use crate::clock::Clock;
use crate::executor::engine::is_finished;
use crate::executor::{Action, ExecError, Executor, RunError, RunState};
use crate::gateway::Gateway;
use crate::records::{is_valid_chain_id, RecordFilter, RecordStore};
use crate::workflow::WorkflowError;

pub struct AppState {
    pub executor: Arc<Executor>,
    pub gateway: Arc<Gateway>,
    pub store: Arc<RecordStore>,
    pub clock: Arc<dyn Clock>,
    pub token: String,
    campaigns: Mutex<HashMap<String, AbortFlag>>,
}

impl AppState {
    pub fn new(
        executor: Arc<Executor>,
        gateway: Arc<Gateway>,
        clock: Arc<dyn Clock>,
        token: impl Into<String>,
    ) -> Arc<Self> {
        let store = executor.store().clone();
        Arc::new(Self {
            executor,
            gateway,
            store,
            clock,
            token: token.into(),
            campaigns: Mutex::new(HashMap::new()),
        })
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl std::fmt::Display) -> Self {
        Self {
            status,
            body: json!({ "error": message.to_string() }),
        }
    }

    fn not_found(what: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<RunError> for ApiError {
    fn from(e: RunError) -> Self {
        match &e {
            RunError::UnknownRun(_) | RunError::UnknownWorkflow(_) => ApiError::not_found(&e),
            RunError::Parse(WorkflowError::Syntax { line, message }) => ApiError {
                status: StatusCode::BAD_REQUEST,
                body: json!({ "error": "syntax", "line": line, "message": message }),
            },
            RunError::Parse(WorkflowError::UnknownStep(_))
            | RunError::Exec(ExecError::UnknownStep(_)) => ApiError::not_found(&e),
            RunError::Parse(WorkflowError::Schema(m)) => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: json!({ "error": "schema", "message": m }),
            },
            RunError::Invalid(v) | RunError::Exec(ExecError::Validation(v)) => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: json!({ "error": "invalid", "violations": v }),
            },
            RunError::Exec(ExecError::Infeasible(_)) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, &e)
            }
            RunError::Exec(ExecError::UnknownAction(_)) => {
                ApiError::new(StatusCode::BAD_REQUEST, &e)
            }
            RunError::Exec(ExecError::IllegalTransition(_) | ExecError::NotAwaitingHuman(_))
            | RunError::Inactive(_) => ApiError::new(StatusCode::CONFLICT, &e),
            RunError::Exec(_) | RunError::Record(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, &e)
            }
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Builds the router. `console_dir`, if set, is served under `/console`.
pub fn router(state: Arc<AppState>, console_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/workflows", post(submit_workflow).get(list_workflows))
        .route("/runs", post(start_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/actions", post(run_action))
        .route("/runs/{id}/steps/{sid}/complete", post(complete_step))
        .route("/runs/{id}/events", get(stream_events))
        .route("/records", get(query_records))
        .route("/records/{chain}/verify", get(verify_chain))
        .route("/campaigns", post(start_campaign).get(list_campaigns))
        .route("/campaigns/{id}", get(get_campaign))
        .route("/campaigns/{id}/abort", post(abort_campaign))
        .route("/campaigns/{id}/events", get(stream_events))
        .route_layer(middleware::from_fn_with_state(state.clone(), auth));
    let mut app = Router::new().route("/health", get(health)).merge(api);
    if let Some(dir) = console_dir {
        app = app.nest_service("/console", ServeDir::new(dir));
    }
    app.with_state(state)
}

async fn auth(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    req: Request,
    next: Next,
) -> Response {
    if state.token.is_empty() {
        return next.run(req).await;
    }
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(state.token.as_str()) {
        next.run(req).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response()
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "status": "ok", "adapters": state.gateway.capabilities() }))
}

async fn submit_workflow(
    State(state): State<Arc<AppState>>,
    body: String,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let w = state.executor.submit_workflow(&body)?;
    info!(workflow = %w.id, "workflow submitted");
    Ok((
        StatusCode::CREATED,
        Json(json!({ "workflow_id": w.id, "steps": w.steps.len() })),
    ))
}

async fn list_workflows(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!(state.executor.workflow_ids()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunView {
    pub run_id: String,
    pub workflow_id: String,
    pub status: String,
    pub steps: BTreeMap<String, String>,
    pub clock: u64,
}

impl From<&RunState> for RunView {
    fn from(s: &RunState) -> Self {
        Self {
            run_id: s.run_id.clone(),
            workflow_id: s.workflow_id().to_owned(),
            status: format!("{:?}", s.status),
            steps: s
                .step_states
                .iter()
                .map(|(k, v)| (k.clone(), format!("{v:?}")))
                .collect(),
            clock: s.clock,
        }
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    let text = if body.is_empty() {
        &b"{}"[..]
    } else {
        &body[..]
    };
    serde_json::from_slice(text).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))
}

#[derive(Deserialize)]
struct StartRun {
    workflow_id: String,
}

async fn start_run(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<RunView>)> {
    let req: StartRun = parse_json(&body)?;
    let run = state.executor.start(&req.workflow_id).await?;
    Ok((StatusCode::CREATED, Json(RunView::from(&run))))
}

async fn list_runs(State(state): State<Arc<AppState>>) -> Json<Vec<RunView>> {
    let ids = state.executor.run_ids();
    Json(
        ids.iter()
            .filter_map(|id| state.executor.state(id).ok())
            .map(|s| RunView::from(&s))
            .collect(),
    )
}

async fn get_run(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<RunView>> {
    Ok(Json(RunView::from(&state.executor.state(&id)?)))
}

#[derive(Deserialize)]
struct ActionBody {
    action: String,
}

async fn run_action(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<RunView>> {
    let req: ActionBody = parse_json(&body)?;
    // An unknown run is a 404 even when the action name is also bad.
    state.executor.state(&id)?;
    let action: Action = req.action.parse().map_err(RunError::from)?;
    let run = state.executor.action(&id, action).await?;
    Ok(Json(RunView::from(&run)))
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct CompleteBody {
    operator: String,
    note: String,
}

async fn complete_step(
    State(state): State<Arc<AppState>>,
    UrlPath((id, sid)): UrlPath<(String, String)>,
    body: Bytes,
) -> ApiResult<Json<RunView>> {
    let req: CompleteBody = parse_json(&body)?;
    let current = state.executor.state(&id)?;
    if current.step(&sid).is_none() {
        return Err(ApiError::not_found(format!("unknown step `{sid}`")));
    }
    let operator = if req.operator.is_empty() {
        "unknown"
    } else {
        req.operator.as_str()
    };
    let run = state
        .executor
        .complete(&id, &sid, operator, &req.note)
        .await?;
    Ok(Json(RunView::from(&run)))
}

#[derive(Deserialize)]
struct FromSeq {
    from: Option<u64>,
}

fn ends_chain(kind: &str) -> bool {
    is_finished(kind) || kind == CAMPAIGN_COMPLETED
}

/// History from `from` onwards, then the live tail, one canonical record
/// per line. The response ends after a terminal record.
async fn stream_events(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<FromSeq>,
) -> ApiResult<Response> {
    if state.store.is_empty(&id) {
        return Err(ApiError::not_found(format!("unknown run `{id}`")));
    }
    let rx = state.store.subscribe();
    let start = (state.store.clone(), id, q.from.unwrap_or(0), rx, false);
    let stream = futures::stream::unfold(start, |(store, chain, next, mut rx, done)| async move {
        if done {
            return None;
        }
        loop {
            let records = store.query(&RecordFilter::chain(chain.clone()).from_seq(next));
            if let Some(last) = records.last() {
                let next = last.seq + 1;
                let finished = records.iter().any(|r| ends_chain(&r.kind));
                let mut bytes = Vec::new();
                for r in &records {
                    bytes.extend(r.to_line());
                    bytes.push(b'\n');
                }
                return Some((
                    Ok::<_, Infallible>(Bytes::from(bytes)),
                    (store, chain, next, rx, finished),
                ));
            }
            if rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok((
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        Body::from_stream(stream),
    )
        .into_response())
}

#[derive(Deserialize)]
struct RecordQuery {
    run_id: Option<String>,
    kind: Option<String>,
    from: Option<u64>,
    to: Option<u64>,
    limit: Option<usize>,
}

async fn query_records(
    State(state): State<Arc<AppState>>,
    Query(q): Query<RecordQuery>,
) -> Json<Value> {
    let filter = RecordFilter {
        run_id: q.run_id,
        kind: q.kind,
        from_seq: q.from,
        to_seq: q.to,
        limit: q.limit,
    };
    Json(json!(state.store.query(&filter)))
}

async fn verify_chain(
    State(state): State<Arc<AppState>>,
    UrlPath(chain): UrlPath<String>,
) -> ApiResult<Json<Value>> {
    if state.store.is_empty(&chain) {
        return Err(ApiError::not_found(format!("unknown chain `{chain}`")));
    }
    let report = state
        .store
        .verify_chain(&chain)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    Ok(Json(json!(report)))
}

async fn start_campaign(
    State(state): State<Arc<AppState>>,
    body: String,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let cfg = parse_campaign_config(&body).map_err(|e| match e {
        CampaignError::Syntax { line, message } => ApiError {
            status: StatusCode::BAD_REQUEST,
            body: json!({ "error": "syntax", "line": line, "message": message }),
        },
        other => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, other),
    })?;
    if !is_valid_chain_id(&cfg.campaign_id) || !state.store.is_empty(&cfg.campaign_id) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("chain `{}` already exists", cfg.campaign_id),
        ));
    }
    let abort = AbortFlag::default();
    {
        let mut campaigns = state.campaigns.lock().expect("campaigns lock");
        if campaigns.contains_key(&cfg.campaign_id) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("campaign `{}` is running", cfg.campaign_id),
            ));
        }
        campaigns.insert(cfg.campaign_id.clone(), abort.clone());
    }
    let id = cfg.campaign_id.clone();
    let st = state.clone();
    tokio::spawn(async move {
        let outcome = run_campaign(&cfg, &st.gateway, &st.store, st.clock.as_ref(), &abort).await;
        match outcome {
            Ok(r) => {
                info!(campaign = %cfg.campaign_id, status = ?r.status, hits = r.hits.len(), "campaign finished")
            }
            Err(e) => warn!(campaign = %cfg.campaign_id, error = %e, "campaign failed"),
        }
        st.campaigns
            .lock()
            .expect("campaigns lock")
            .remove(&cfg.campaign_id);
    });
    Ok((StatusCode::CREATED, Json(json!({ "campaign_id": id }))))
}

async fn list_campaigns(State(state): State<Arc<AppState>>) -> Json<Value> {
    let ids: Vec<String> = state
        .store
        .chain_ids()
        .into_iter()
        .filter(|c| campaign_report(&state.store, c).is_some())
        .collect();
    Json(json!(ids))
}

async fn get_campaign(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Value>> {
    let report = campaign_report(&state.store, &id)
        .ok_or_else(|| ApiError::not_found(format!("unknown campaign `{id}`")))?;
    Ok(Json(json!(report)))
}

async fn abort_campaign(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Value>> {
    let flag = state
        .campaigns
        .lock()
        .expect("campaigns lock")
        .get(&id)
        .cloned();
    match flag {
        Some(f) => {
            f.abort();
            Ok(Json(json!({ "campaign_id": id, "abort_requested": true })))
        }
        None if campaign_report(&state.store, &id).is_some() => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("campaign `{id}` is not running"),
        )),
        None => Err(ApiError::not_found(format!("unknown campaign `{id}`"))),
    }
}
