use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use histoloop_core::active::ActiveError;
use histoloop_core::cluster::SessionError;

/// JSON error body: `{"error": code, "message": ..., "hint": ...}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub hint: Option<String>,
}

#[derive(Serialize)]
struct Body<'a> {
    error: &'a str,
    message: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    hint: Option<&'a str>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), hint: None }
    }

    pub fn with_hint(mut self, hint: impl Into<String>) -> Self {
        self.hint = Some(hint.into());
        self
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }

    pub fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message.to_string())
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({}): {}", self.code, self.status.as_u16(), self.message)?;
        if let Some(h) = &self.hint {
            write!(f, "; hint: {h}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = self.code, "{}", self.message);
        }
        let body = Body { error: self.code, message: &self.message, hint: self.hint.as_deref() };
        (self.status, Json(body)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let message = e.to_string();
        let (status, code) = match e {
            SessionError::Finalized => (StatusCode::GONE, "finalized"),
            SessionError::UnknownCluster { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_cluster"),
            SessionError::EmptyCluster(_) => (StatusCode::UNPROCESSABLE_ENTITY, "empty_cluster"),
            SessionError::Unreviewed { .. } => (StatusCode::CONFLICT, "unreviewed_clusters"),
            SessionError::NoHeterogeneous => (StatusCode::CONFLICT, "no_heterogeneous_clusters"),
            SessionError::AlreadyReclustered(_) => (StatusCode::CONFLICT, "already_reclustered"),
            SessionError::ReclusterRequired(_) => (StatusCode::CONFLICT, "recluster_required"),
            SessionError::MissingEmbeddings { .. } => (StatusCode::CONFLICT, "missing_embeddings"),
            SessionError::Replay(_) => (StatusCode::INTERNAL_SERVER_ERROR, "replay_failed"),
            SessionError::Cluster(_) => (StatusCode::UNPROCESSABLE_ENTITY, "clustering_failed"),
        };
        Self::new(status, code, message)
    }
}

impl From<ActiveError> for ApiError {
    fn from(e: ActiveError) -> Self {
        let message = e.to_string();
        match e {
            ActiveError::Closed(_) => Self::new(StatusCode::CONFLICT, "round_closed", message),
            ActiveError::NotInPool(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "not_in_pool", message),
            ActiveError::NoRound(_) => Self::new(StatusCode::CONFLICT, "no_model_round", message)
                .with_hint("apply a model to the pool with `histoloop round apply`"),
            _ => Self::internal(message),
        }
    }
}
