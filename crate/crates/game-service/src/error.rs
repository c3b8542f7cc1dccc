use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;

use pragma::corpus::CorpusError;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("no trial {0} in this session")]
    UnknownTrial(usize),
    #[error("unknown pair set {0}")]
    UnknownPairSet(String),
    #[error("no captions from speaker {0} for this pair set")]
    UnknownSpeaker(String),
    #[error("{wanted} trials requested but only {available} pairs are available")]
    PairSetExhausted { wanted: usize, available: usize },
    #[error("trial {0} is already answered")]
    AlreadyAnswered(String),
    #[error("trial {0} is already rated")]
    AlreadyRated(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("data directory: {0}")]
    Data(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize)]
struct Body {
    code: &'static str,
    message: String,
}

impl ServiceError {
    fn status_and_code(&self) -> (StatusCode, &'static str) {
        use ServiceError::*;
        match self {
            UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            UnknownTrial(_) => (StatusCode::NOT_FOUND, "unknown_trial"),
            UnknownPairSet(_) => (StatusCode::NOT_FOUND, "unknown_pair_set"),
            UnknownSpeaker(_) => (StatusCode::NOT_FOUND, "unknown_speaker"),
            PairSetExhausted { .. } => (StatusCode::CONFLICT, "pair_set_exhausted"),
            AlreadyAnswered(_) => (StatusCode::CONFLICT, "already_answered"),
            AlreadyRated(_) => (StatusCode::CONFLICT, "already_rated"),
            BadRequest(_) => (StatusCode::UNPROCESSABLE_ENTITY, "bad_request"),
            Data(_) | Corpus(_) | Io(_) | Json(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, code) = self.status_and_code();
        let body = Body {
            code,
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ServiceError {
    fn from(r: JsonRejection) -> Self {
        ServiceError::BadRequest(r.body_text())
    }
}
