use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown stream {0}")]
    UnknownStream(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("stream {0} already exists")]
    StreamExists(String),
    #[error("invalid stream config: {0}")]
    BadConfig(String),
    #[error("a day is already open in this session")]
    DayOpen,
    #[error("no day is open in this session")]
    NoOpenDay,
    #[error("the day is closed")]
    DayClosed,
    #[error("expected a set of {expected} labels, got {got}")]
    SetSize { expected: usize, got: usize },
    #[error("set must be a contiguous range: {0:?}")]
    NotContiguous(Vec<String>),
    #[error("label {0:?} is not in the label space")]
    UnknownLabel(String),
    #[error("the day allows at most {0} rounds")]
    RoundLimit(usize),
    #[error("turn for round {got} does not match the next round {expected}")]
    RoundMismatch { expected: usize, got: usize },
    #[error("finalize needs at least one completed round")]
    NoCompletedRound,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::UnknownStream(_) => "unknown_stream",
            ApiError::UnknownSession(_) => "unknown_session",
            ApiError::StreamExists(_) => "stream_exists",
            ApiError::BadConfig(_) => "bad_config",
            ApiError::DayOpen => "day_open",
            ApiError::NoOpenDay => "no_open_day",
            ApiError::DayClosed => "day_closed",
            ApiError::SetSize { .. } => "set_size",
            ApiError::NotContiguous(_) => "not_contiguous",
            ApiError::UnknownLabel(_) => "unknown_label",
            ApiError::RoundLimit(_) => "round_limit",
            ApiError::RoundMismatch { .. } => "round_mismatch",
            ApiError::NoCompletedRound => "no_completed_round",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Storage(_) => "storage",
            ApiError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownStream(_) | ApiError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ApiError::StreamExists(_)
            | ApiError::DayOpen
            | ApiError::NoOpenDay
            | ApiError::DayClosed
            | ApiError::RoundLimit(_)
            | ApiError::RoundMismatch { .. }
            | ApiError::NoCompletedRound => StatusCode::CONFLICT,
            ApiError::SetSize { .. } | ApiError::NotContiguous(_) | ApiError::UnknownLabel(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ApiError::BadConfig(_) | ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Storage(_) | ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}
