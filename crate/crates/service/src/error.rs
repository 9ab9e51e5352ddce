//! Mapping from domain errors to HTTP responses.

use atlasforge_core::campaign::{CampaignError, StoreError};
use atlasforge_core::volgrid::VolError;
use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

use crate::api::ErrorBody;

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Option<serde_json::Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), details: None }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad-request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not-found", message)
    }

    pub fn unauthorized(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", message)
    }

    pub fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn with_details(mut self, details: serde_json::Value) -> Self {
        self.details = Some(details);
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.code.to_owned(), message: self.message, details: self.details };
        (self.status, Json(body)).into_response()
    }
}

impl From<CampaignError> for ApiError {
    fn from(e: CampaignError) -> Self {
        use CampaignError as E;
        let message = e.to_string();
        let (status, code) = match &e {
            E::NotSelected { .. } => (StatusCode::CONFLICT, "not-selected"),
            E::DuplicateRevision { .. } => (StatusCode::CONFLICT, "duplicate-revision"),
            E::NoOpenIteration => (StatusCode::CONFLICT, "no-open-iteration"),
            E::WrongIteration { .. } => (StatusCode::CONFLICT, "wrong-iteration"),
            E::IterationIncomplete { .. } => (StatusCode::CONFLICT, "iteration-incomplete"),
            E::IterationAlreadyOpen(_) => (StatusCode::CONFLICT, "iteration-already-open"),
            E::IterationStillOpen(_) => (StatusCode::CONFLICT, "iteration-still-open"),
            E::ManifestNotExported(_) => (StatusCode::CONFLICT, "manifest-not-exported"),
            E::CampaignStopped(_) => (StatusCode::CONFLICT, "campaign-stopped"),
            E::CampaignNotStopped => (StatusCode::CONFLICT, "campaign-not-stopped"),
            E::DimMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "dim-mismatch"),
            E::MaskRequired => (StatusCode::UNPROCESSABLE_ENTITY, "mask-required"),
            E::UnexpectedMask => (StatusCode::UNPROCESSABLE_ENTITY, "unexpected-mask"),
            E::NonBinaryMask => (StatusCode::UNPROCESSABLE_ENTITY, "non-binary-mask"),
            E::EmptyModelTag => (StatusCode::UNPROCESSABLE_ENTITY, "empty-model-tag"),
            E::UnknownVolume(_) => (StatusCode::NOT_FOUND, "unknown-volume"),
            E::UnknownClass(_) => (StatusCode::NOT_FOUND, "unknown-class"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let err = ApiError::new(status, code, message);
        match e {
            E::IterationIncomplete { unresolved } => {
                err.with_details(serde_json::json!({ "unresolved": unresolved }))
            }
            _ => err,
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Campaign(e) => e.into(),
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl From<VolError> for ApiError {
    fn from(e: VolError) -> Self {
        match e {
            VolError::BadAxis(_) => ApiError::bad_request(e.to_string()),
            VolError::IndexOutOfRange { .. } => {
                ApiError::new(StatusCode::RANGE_NOT_SATISFIABLE, "index-out-of-range", e.to_string())
            }
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(e.status(), "invalid-body", e.body_text())
    }
}
