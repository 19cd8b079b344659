use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use ami_core::synthgen::SynthError;
use ami_core::taxonomy::TaxonomyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    InvalidInput,
    Conflict,
    BackendFailure,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::InvalidInput => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::Conflict => StatusCode::CONFLICT,
            ErrorCode::BackendFailure => StatusCode::BAD_GATEWAY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError { code, message: message.into(), detail: None }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::InvalidInput, message)
    }

    pub fn with_detail(mut self, detail: serde_json::Value) -> Self {
        self.detail = Some(detail);
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}

impl From<SynthError> for ApiError {
    fn from(e: SynthError) -> Self {
        let code = match &e {
            SynthError::UnknownCrop(_) => ErrorCode::NotFound,
            SynthError::Config(_) => ErrorCode::InvalidInput,
            _ => ErrorCode::BackendFailure,
        };
        ApiError::new(code, e.to_string())
    }
}

impl From<TaxonomyError> for ApiError {
    fn from(e: TaxonomyError) -> Self {
        let code = match &e {
            TaxonomyError::NotFound(_) => ErrorCode::NotFound,
            TaxonomyError::InvalidInput(_) => ErrorCode::InvalidInput,
            _ => ErrorCode::BackendFailure,
        };
        ApiError::new(code, e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_status_per_code() {
        let all = [ErrorCode::NotFound, ErrorCode::InvalidInput, ErrorCode::Conflict, ErrorCode::BackendFailure];
        let statuses: Vec<u16> = all.iter().map(|c| c.status().as_u16()).collect();
        assert_eq!(statuses, vec![404, 422, 409, 502]);
    }

    #[test]
    fn wire_shape() {
        let e = ApiError::new(ErrorCode::NotFound, "job x");
        assert_eq!(serde_json::to_value(&e).unwrap(), serde_json::json!({"code": "not_found", "message": "job x"}));
    }
}
