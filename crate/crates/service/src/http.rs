use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::HeaderMap;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{NaiveDate, Utc};
use serde::Deserialize;
use serde_json::Value;
use triage_core::ingest::RawEmail;
use triage_core::router::{Ticket, TicketStatus};

use crate::error::ApiError;
use crate::registry::ModelRegistry;
use crate::service::{AssignRequest, AssignResponse, Health, QueueEntry, Service, StatsResponse, SubmitResponse};

/// Header carrying the operator id for manual assignments.
pub const OPERATOR_HEADER: &str = "x-operator-id";

pub fn app(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/emails", post(submit_email))
        .route("/tickets", get(list_tickets))
        .route("/queue/manual", get(manual_queue))
        .route("/queue/manual/{id}/assign", post(assign))
        .route("/admin/retrain", post(retrain))
        .route("/stats", get(stats))
        .route("/healthz", get(healthz))
        .with_state(svc)
}

async fn blocking<T, F>(svc: Arc<Service>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Service) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn query_error(e: QueryRejection) -> ApiError {
    ApiError::bad_request(format!("bad query: {}", e.body_text()))
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

/// `received_at` defaults to the arrival time.
fn parse_email(body: &[u8]) -> Result<RawEmail, ApiError> {
    let mut v: Value = parse_json(body)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| ApiError::bad_request("email must be a JSON object"))?;
    obj.entry("received_at")
        .or_insert_with(|| Value::String(Utc::now().to_rfc3339()));
    serde_json::from_value(v).map_err(|e| ApiError::bad_request(format!("malformed email: {e}")))
}

async fn submit_email(State(svc): State<Arc<Service>>, body: Bytes) -> Result<Json<SubmitResponse>, ApiError> {
    let raw = parse_email(&body)?;
    blocking(svc, move |s| s.submit(&raw)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct TicketQuery {
    status: Option<TicketStatus>,
}

async fn list_tickets(
    State(svc): State<Arc<Service>>,
    q: Result<Query<TicketQuery>, QueryRejection>,
) -> Result<Json<Vec<Ticket>>, ApiError> {
    let Query(q) = q.map_err(query_error)?;
    Ok(Json(svc.tickets(q.status)))
}

async fn manual_queue(State(svc): State<Arc<Service>>) -> Json<Vec<QueueEntry>> {
    Json(svc.manual_queue())
}

async fn assign(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<AssignResponse>, ApiError> {
    let mut req: AssignRequest = parse_json(&body)?;
    if req.operator.is_none() {
        req.operator = headers
            .get(OPERATOR_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
    }
    blocking(svc, move |s| s.assign(&id, &req, Utc::now())).await.map(Json)
}

async fn retrain(State(svc): State<Arc<Service>>) -> Result<Json<ModelRegistry>, ApiError> {
    blocking(svc, |s| s.retrain()).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct StatsQuery {
    from: Option<String>,
    to: Option<String>,
}

fn parse_date(key: &str, v: Option<&str>) -> Result<Option<NaiveDate>, ApiError> {
    v.filter(|s| !s.is_empty())
        .map(|s| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .map_err(|_| ApiError::bad_request(format!("`{key}` must be a YYYY-MM-DD date, got {s:?}")))
        })
        .transpose()
}

async fn stats(
    State(svc): State<Arc<Service>>,
    q: Result<Query<StatsQuery>, QueryRejection>,
) -> Result<Json<StatsResponse>, ApiError> {
    let Query(q) = q.map_err(query_error)?;
    let from = parse_date("from", q.from.as_deref())?;
    let to = parse_date("to", q.to.as_deref())?;
    svc.stats(from, to).map(Json)
}

async fn healthz(State(svc): State<Arc<Service>>) -> Json<Health> {
    Json(svc.health())
}
