use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;

use crate::duel::DuelError;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{field}: {message}")]
    Validation { field: String, message: String },
    #[error("{0}")]
    Internal(String),
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'a str>,
}

impl ApiError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError::Validation { field: field.into(), message: message.into() }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Validation { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<DuelError> for ApiError {
    fn from(e: DuelError) -> Self {
        match e {
            DuelError::Invalid { field, message } => ApiError::invalid(field, message),
            other => ApiError::Conflict(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (kind, field) = match &self {
            ApiError::NotFound(_) => ("not_found", None),
            ApiError::Conflict(_) => ("conflict", None),
            ApiError::Validation { field, .. } => ("validation", Some(field.as_str())),
            ApiError::Internal(_) => ("internal", None),
        };
        let message = match &self {
            ApiError::Validation { message, .. } => message.clone(),
            other => other.to_string(),
        };
        let body = ErrorBody { error: kind, message, field };
        (self.status(), Json(body)).into_response()
    }
}

/// Parses a JSON body, reporting the offending field on failure.
pub fn parse_body<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.to_string();
        let field = if path != "." {
            path
        } else {
            quoted_name(&message).unwrap_or_else(|| "body".to_string())
        };
        ApiError::invalid(field, message)
    })
}

/// Field name from serde messages such as "missing field `gap`".
fn quoted_name(message: &str) -> Option<String> {
    let (_, rest) = message.split_once('`')?;
    let (name, _) = rest.split_once('`')?;
    Some(name.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    #[allow(dead_code)]
    struct Probe {
        gap: f64,
        seed: u64,
    }

    fn field_of(body: &str) -> String {
        match parse_body::<Probe>(body.as_bytes()).unwrap_err() {
            ApiError::Validation { field, .. } => field,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of(r#"{"gap": "x", "seed": 1}"#), "gap");
        assert_eq!(field_of(r#"{"gap": 0.5}"#), "seed");
        assert_eq!(field_of(r#"{"gap": 0.5, "seed": 1, "sede": 2}"#), "sede");
        assert_eq!(field_of(r#"{"gap": 0.5, "seed": -1}"#), "seed");
        assert_eq!(field_of("not json"), "body");
    }
}
