use std::path::PathBuf;
use std::sync::Arc;

use abis_core::pipeline::EnrollmentPacket;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use crate::cases::{AdjudicationCase, CandidateView, CaseDecision, CasePage, CaseState};
use crate::engine::{DedupEngine, EnrollResult, Stats, VerifyResult};
use crate::error::ServiceError;
use crate::store::decode_template;

pub const DEFAULT_PAGE: usize = 50;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyRequest {
    pub id: u64,
    /// Base64 of the binary template record.
    pub template: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub template: String,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResponse {
    pub candidates: Vec<CandidateView>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub decision: CaseDecision,
    pub adjudicator: String,
    /// Candidate to link a duplicate to; the top candidate when omitted.
    #[serde(default)]
    pub gallery_id: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
pub struct CaseQuery {
    pub state: Option<String>,
    pub cursor: Option<String>,
    pub limit: Option<String>,
}

pub fn router(engine: Arc<DedupEngine>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/stats", get(stats))
        .route("/v1/enroll", post(enroll))
        .route("/v1/verify", post(verify))
        .route("/v1/search", post(search))
        .route("/v1/adjudication/cases", get(list_cases))
        .route("/v1/adjudication/cases/{id}", get(get_case))
        .route("/v1/adjudication/cases/{id}/decision", post(decide_case))
        .with_state(engine);
    match ui_dir {
        Some(dir) => api.nest_service("/ui", ServeDir::new(dir)),
        None => api,
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid request body: {e}")))
}

/// Runs CPU-bound engine work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ServiceError>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Storage(format!("worker failed: {e}")))?
}

fn case_id(raw: &str) -> Result<u64, ServiceError> {
    raw.parse()
        .map_err(|_| ServiceError::BadRequest(format!("invalid case id {raw:?}")))
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn stats(State(engine): State<Arc<DedupEngine>>) -> Json<Stats> {
    Json(engine.stats())
}

async fn enroll(State(engine): State<Arc<DedupEngine>>, body: Bytes) -> Result<Json<EnrollResult>, ServiceError> {
    let packet: EnrollmentPacket = parse_body(&body)?;
    Ok(Json(blocking(move || engine.enroll(&packet)).await?))
}

async fn verify(State(engine): State<Arc<DedupEngine>>, body: Bytes) -> Result<Json<VerifyResult>, ServiceError> {
    let req: VerifyRequest = parse_body(&body)?;
    let template = decode_template(&req.template)?;
    Ok(Json(blocking(move || engine.verify(req.id, &template)).await?))
}

async fn search(State(engine): State<Arc<DedupEngine>>, body: Bytes) -> Result<Json<SearchResponse>, ServiceError> {
    let req: SearchRequest = parse_body(&body)?;
    let template = decode_template(&req.template)?;
    let candidates = blocking(move || engine.search(&template, req.k)).await?;
    Ok(Json(SearchResponse { candidates }))
}

async fn list_cases(
    State(engine): State<Arc<DedupEngine>>,
    Query(q): Query<CaseQuery>,
) -> Result<Json<CasePage>, ServiceError> {
    let state = match q.state.as_deref() {
        None | Some("") => None,
        Some(s) => Some(s.parse::<CaseState>().map_err(ServiceError::BadRequest)?),
    };
    let limit = match q.limit.as_deref() {
        None | Some("") => DEFAULT_PAGE,
        Some(l) => l
            .parse()
            .map_err(|_| ServiceError::BadRequest(format!("invalid limit {l:?}")))?,
    };
    Ok(Json(engine.list_cases(state, q.cursor.as_deref(), limit)?))
}

async fn get_case(
    State(engine): State<Arc<DedupEngine>>,
    Path(id): Path<String>,
) -> Result<Json<AdjudicationCase>, ServiceError> {
    Ok(Json(engine.case(case_id(&id)?)?))
}

async fn decide_case(
    State(engine): State<Arc<DedupEngine>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<AdjudicationCase>, ServiceError> {
    let id = case_id(&id)?;
    let req: DecisionRequest = parse_body(&body)?;
    Ok(Json(
        blocking(move || engine.adjudicate(id, req.decision, &req.adjudicator, req.gallery_id)).await?,
    ))
}
