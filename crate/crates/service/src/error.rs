use std::collections::BTreeMap;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use triage_core::router::RouterError;

/// Machine-readable error codes returned by the API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    NotReady,
    NotFound,
    AlreadyAssigned,
    RetrainRunning,
    InvalidTriple,
    RegionRequired,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::NotReady => StatusCode::SERVICE_UNAVAILABLE,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::AlreadyAssigned | ErrorCode::RetrainRunning => StatusCode::CONFLICT,
            ErrorCode::InvalidTriple | ErrorCode::RegionRequired => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default)]
    pub detail: BTreeMap<String, Value>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            detail: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.detail.insert(key.to_string(), value);
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Internal, message)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl From<RouterError> for ApiError {
    fn from(e: RouterError) -> Self {
        let message = e.to_string();
        match e {
            RouterError::UnknownItem(id) => ApiError::new(ErrorCode::NotFound, message).with("email_id", json!(id)),
            RouterError::AlreadyAssigned { email_id, ticket_id } => ApiError::new(ErrorCode::AlreadyAssigned, message)
                .with("email_id", json!(email_id))
                .with("ticket_id", json!(ticket_id)),
            RouterError::InvalidTriple {
                cat1,
                cat2,
                cat3,
                valid,
            } => ApiError::new(ErrorCode::InvalidTriple, message)
                .with("triple", json!({"cat1": cat1, "cat2": cat2, "cat3": cat3}))
                .with("valid_pairs", json!(valid)),
            RouterError::RegionRequired(id) => {
                ApiError::new(ErrorCode::RegionRequired, message).with("email_id", json!(id))
            }
            _ => ApiError::internal(message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}
