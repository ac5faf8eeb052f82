use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{0}")]
    BadRequest(String),

    #[error("message {index} uses the reserved interruption role")]
    Spoofed { index: usize },

    #[error("message {index} contains a sentinel marker")]
    SentinelCollision { index: usize },

    #[error("proxy mode is not configured")]
    ProxyDisabled,

    #[error("{0}")]
    Upstream(String),

    #[error("{0}")]
    Internal(String),
}

impl GatewayError {
    pub fn status(&self) -> StatusCode {
        match self {
            GatewayError::BadRequest(_) => StatusCode::BAD_REQUEST,
            GatewayError::Spoofed { .. } => StatusCode::FORBIDDEN,
            GatewayError::SentinelCollision { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            GatewayError::ProxyDisabled => StatusCode::SERVICE_UNAVAILABLE,
            GatewayError::Upstream(_) => StatusCode::BAD_GATEWAY,
            GatewayError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::BadRequest(_) => "bad_request",
            GatewayError::Spoofed { .. } => "interruption_role_rejected",
            GatewayError::SentinelCollision { .. } => "sentinel_collision",
            GatewayError::ProxyDisabled => "proxy_disabled",
            GatewayError::Upstream(_) => "upstream_failure",
            GatewayError::Internal(_) => "internal",
        }
    }

    pub fn message_index(&self) -> Option<usize> {
        match self {
            GatewayError::Spoofed { index } | GatewayError::SentinelCollision { index } => Some(*index),
            _ => None,
        }
    }
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let mut error = json!({ "code": self.code(), "message": self.to_string() });
        if let Some(index) = self.message_index() {
            error["message_index"] = json!(index);
        }
        (self.status(), Json(json!({ "error": error }))).into_response()
    }
}
