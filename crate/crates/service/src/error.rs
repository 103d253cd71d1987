use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use branchvis_core::pipeline::PipelineError;
use branchvis_core::query::QueryError;
use branchvis_core::store::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    BadRequest,
    Conflict,
    Corruption,
    NotReady,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::Conflict => StatusCode::CONFLICT,
            ErrorCode::Corruption => StatusCode::INTERNAL_SERVER_ERROR,
            ErrorCode::NotReady => StatusCode::SERVICE_UNAVAILABLE,
        }
    }
}

/// JSON error body: `{"code", "message", "detail"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    /// Offending id or field, when there is one.
    #[serde(default)]
    pub detail: Option<String>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
            detail: None,
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(ErrorCode::BadRequest, message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        match e {
            StoreError::UnknownRun(id) => {
                ApiError::new(ErrorCode::NotFound, message).with_detail(id.0)
            }
            StoreError::InvalidPatch(_) | StoreError::BadRequest(_) => {
                ApiError::bad_request(message)
            }
            StoreError::Conflict(_) => ApiError::new(ErrorCode::Conflict, message),
            StoreError::RunFailed { run, .. } => {
                ApiError::new(ErrorCode::Conflict, message).with_detail(run.0)
            }
            StoreError::MissingChunk(id) => {
                ApiError::new(ErrorCode::Corruption, message).with_detail(id.0)
            }
            StoreError::Corruption(_) | StoreError::Io(_) => {
                ApiError::new(ErrorCode::Corruption, message)
            }
            StoreError::NotReady(_) => ApiError::new(ErrorCode::NotReady, message),
        }
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::Store(s) => s.into(),
            QueryError::Stale { .. } => ApiError::new(ErrorCode::Conflict, e.to_string()),
            QueryError::UnknownField(ref f) => {
                let detail = f.clone();
                ApiError::bad_request(e.to_string()).with_detail(detail)
            }
            other => ApiError::bad_request(other.to_string()),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        ApiError::bad_request(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}
