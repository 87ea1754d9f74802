use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use orscene::{Error, ErrorKind};
use serde_json::{json, Value};

/// Error body: `{"error": {"code", "message", "detail"}}`.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), detail: Value::Null }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_input", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let detail = match &e {
            Error::InvalidField { field, message } => json!({ "field": field, "reason": message }),
            Error::FrameInput { frame, .. } => json!({ "frame": frame }),
            Error::MissingEntity { entity, frame } => json!({ "entity": entity, "frame": frame }),
            Error::DegenerateMask { pixels, min } => json!({ "pixels": pixels, "min": min }),
            _ => Value::Null,
        };
        let (status, code) = match e.kind() {
            ErrorKind::Input => match e {
                Error::InvalidField { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "validation_error"),
                _ => (StatusCode::BAD_REQUEST, "invalid_input"),
            },
            ErrorKind::NotFound => (StatusCode::NOT_FOUND, "not_found"),
            ErrorKind::Config => (StatusCode::BAD_REQUEST, "config_error"),
            ErrorKind::Backend => (StatusCode::BAD_GATEWAY, "backend_error"),
            ErrorKind::Internal => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self { status, code, message: e.to_string(), detail }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = self.code, "{}", self.message);
        }
        let body = json!({
            "error": { "code": self.code, "message": self.message, "detail": self.detail }
        });
        (self.status, Json(body)).into_response()
    }
}
