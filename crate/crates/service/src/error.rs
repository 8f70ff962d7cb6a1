use abis_core::fusion::FusionError;
use abis_core::index::IndexError;
use abis_core::pipeline::PipelineError;
use abis_core::template::TemplateError;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    /// The gallery cannot accept more rows.
    #[error("gallery at capacity ({capacity} rows)")]
    Capacity { capacity: usize },
    #[error("configuration: {0}")]
    Config(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Capacity { .. } => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Config(_) | ServiceError::Storage(_) | ServiceError::Io(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "state_conflict",
            ServiceError::Capacity { .. } => "capacity",
            ServiceError::Config(_) => "config",
            ServiceError::Storage(_) | ServiceError::Io(_) => "storage",
        }
    }
}

impl From<IndexError> for ServiceError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Capacity { capacity } => ServiceError::Capacity { capacity },
            IndexError::UnknownId(id) => ServiceError::NotFound(format!("gallery id {id} not found")),
            IndexError::Io(e) => ServiceError::Io(e),
            IndexError::Format(m) => ServiceError::Storage(m),
            other => ServiceError::BadRequest(other.to_string()),
        }
    }
}

impl From<TemplateError> for ServiceError {
    fn from(e: TemplateError) -> Self {
        ServiceError::BadRequest(e.to_string())
    }
}

impl From<FusionError> for ServiceError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Io(e) => ServiceError::Io(e),
            FusionError::Profile(m) => ServiceError::Config(m),
            other => ServiceError::BadRequest(other.to_string()),
        }
    }
}

impl From<PipelineError> for ServiceError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Io(e) => ServiceError::Io(e),
            PipelineError::Config(m) => ServiceError::Config(m),
            other => ServiceError::BadRequest(other.to_string()),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.code(), "message": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}
