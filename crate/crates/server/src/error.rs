//! The one error shape every endpoint returns.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use blockrag_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApiErrorCode {
    NotFound,
    Conflict,
    Invalid,
    AdapterUnavailable,
    Internal,
}

impl ApiErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ApiErrorCode::NotFound => StatusCode::NOT_FOUND,
            ApiErrorCode::Conflict => StatusCode::CONFLICT,
            ApiErrorCode::Invalid => StatusCode::BAD_REQUEST,
            ApiErrorCode::AdapterUnavailable => StatusCode::SERVICE_UNAVAILABLE,
            ApiErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ApiErrorCode,
    pub message: String,
    #[serde(default)]
    pub detail: Value,
}

impl ApiError {
    pub fn new(code: ApiErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into(), detail: Value::Object(Default::default()) }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(ApiErrorCode::Invalid, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ApiErrorCode::Internal, message)
    }

    fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }
}

impl From<Error> for ApiError {
    fn from(error: Error) -> Self {
        let message = error.to_string();
        match &error {
            Error::NotFound { kind, id } => {
                ApiError::new(ApiErrorCode::NotFound, message).with_detail(json!({ "kind": kind, "id": id }))
            }
            Error::Conflict(_) => ApiError::new(ApiErrorCode::Conflict, message),
            Error::Invalid(_) | Error::Schema(_) | Error::EmptyDocument | Error::Undefined(_) => {
                ApiError::invalid(message)
            }
            Error::Format { format, .. } => ApiError::invalid(message).with_detail(json!({ "format": format })),
            Error::Script { script, line, .. } => {
                ApiError::invalid(message).with_detail(json!({ "script": script, "line": line }))
            }
            Error::AdapterUnavailable(adapter) | Error::Adapter { adapter, .. } => {
                ApiError::new(ApiErrorCode::AdapterUnavailable, message).with_detail(json!({ "adapter": adapter }))
            }
            Error::EmbedderMismatch { .. } | Error::Io { .. } | Error::Json(_) => {
                tracing::error!(%error, "internal error");
                ApiError::internal(message)
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;
