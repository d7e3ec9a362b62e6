use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn type_mismatch(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "type_mismatch", message)
    }

    pub fn gone(message: impl Into<String>) -> Self {
        Self::new(StatusCode::GONE, "session_stopped", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

/// Errors from the engine caused by the submitted input are the client's.
impl From<mint_core::Error> for ApiError {
    fn from(e: mint_core::Error) -> Self {
        use mint_core::Error as E;
        match e {
            E::SchemaMismatch(_) | E::Encoding(_) | E::DimensionMismatch { .. } => ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "invalid_answer",
                e.to_string(),
            ),
            E::Precondition(_) => ApiError::type_mismatch(e.to_string()),
            E::Config(_) => ApiError::bad_request(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}
