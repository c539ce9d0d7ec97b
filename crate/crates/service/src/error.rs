use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use cfassay_core::Error as CoreError;

/// Error body returned by every endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_input", message)
    }

    pub fn capability(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "capability_missing", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let (status, code) = match &e {
            CoreError::NotFound { .. } => (StatusCode::NOT_FOUND, "not_found"),
            CoreError::NoEditablePositions(_) => (StatusCode::UNPROCESSABLE_ENTITY, "no_editable_tokens"),
            CoreError::EmptyCandidates(_) => (StatusCode::UNPROCESSABLE_ENTITY, "no_candidates"),
            CoreError::Unsupported(_) => (StatusCode::UNPROCESSABLE_ENTITY, "capability_missing"),
            CoreError::DanglingReference(_) => (StatusCode::CONFLICT, "dangling_reference"),
            CoreError::Remote(_) => (StatusCode::BAD_GATEWAY, "adapter_error"),
            CoreError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
            CoreError::Parse { .. } => (StatusCode::BAD_REQUEST, "parse_error"),
            _ => (StatusCode::BAD_REQUEST, "invalid_input"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}
