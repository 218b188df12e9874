//! Routes:
//!
//! ```text
//! GET  /health
//! GET  /streams
//! POST /streams                    StreamConfig        -> StreamCreated
//! POST /streams/{id}/sessions                          -> SessionCreated
//! GET  /streams/{id}/state                             -> StreamStateView
//! GET  /streams/{id}/audit                             -> AuditView
//! GET  /sessions/{id}                                 -> SessionView
//! POST /sessions/{id}/days                             -> DayOpened
//! POST /sessions/{id}/turns        TurnRequest         -> TurnReply
//! POST /sessions/{id}/finalize     FinalizeRequest     -> FinalizeReply
//! ```
//!
//! Errors are `{"error": code, "message": text}` with a 4xx/5xx status.

use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;

use crate::config::{ServiceConfig, StreamConfig};
use crate::error::ApiError;
use crate::service::Service;
use crate::wire::*;

type AppState = Arc<Service>;
type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/streams", get(list_streams).post(create_stream))
        .route("/streams/{id}/sessions", post(create_session))
        .route("/streams/{id}/state", get(stream_state))
        .route("/streams/{id}/audit", get(audit))
        .route("/sessions/{id}", get(session_view))
        .route("/sessions/{id}/days", post(begin_day))
        .route("/sessions/{id}/turns", post(turn))
        .route("/sessions/{id}/finalize", post(finalize))
        .with_state(service)
}

/// Runs blocking service work (locks, fsync) off the async workers.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map(Json)
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::BadRequest(e.body_text()))
}

#[derive(Serialize)]
struct StreamList {
    streams: Vec<String>,
}

async fn list_streams(State(svc): State<AppState>) -> Json<StreamList> {
    Json(StreamList {
        streams: svc.stream_ids(),
    })
}

async fn create_stream(
    State(svc): State<AppState>,
    payload: Result<Json<StreamConfig>, JsonRejection>,
) -> Result<(StatusCode, Json<StreamCreated>), ApiError> {
    let cfg = body(payload)?;
    let created = blocking(move || svc.create_stream(cfg)).await?;
    Ok((StatusCode::CREATED, created))
}

async fn create_session(
    State(svc): State<AppState>,
    Path(id): Path<String>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    Ok((StatusCode::CREATED, Json(svc.create_session(&id)?)))
}

async fn stream_state(
    State(svc): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<StreamStateView> {
    blocking(move || svc.stream_state(&id)).await
}

async fn audit(State(svc): State<AppState>, Path(id): Path<String>) -> ApiResult<AuditView> {
    blocking(move || svc.audit(&id)).await
}

async fn session_view(
    State(svc): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<SessionView> {
    Ok(Json(svc.session_view(&id)?))
}

async fn begin_day(State(svc): State<AppState>, Path(id): Path<String>) -> ApiResult<DayOpened> {
    blocking(move || svc.begin_day(&id)).await
}

async fn turn(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<TurnRequest>, JsonRejection>,
) -> ApiResult<TurnReply> {
    let req = body(payload)?;
    blocking(move || svc.submit_turn(&id, req)).await
}

async fn finalize(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    payload: Option<Json<FinalizeRequest>>,
) -> ApiResult<FinalizeReply> {
    // An empty body means "final answer = last submitted set".
    let req = payload.map(|Json(r)| r).unwrap_or_default();
    blocking(move || svc.finalize(&id, req)).await
}

/// Binds, serves until Ctrl-C or SIGTERM, and reaps idle days in the
/// background.
pub async fn serve(config: ServiceConfig) -> Result<(), String> {
    let addr = config.addr()?;
    let service = Arc::new(Service::open(&config).map_err(|e| e.to_string())?);
    let reaper = {
        let svc = service.clone();
        let every = (svc.day_timeout() / 4).clamp(
            std::time::Duration::from_secs(1),
            std::time::Duration::from_secs(60),
        );
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                let svc = svc.clone();
                let _ = tokio::task::spawn_blocking(move || svc.reap_expired(Instant::now())).await;
            }
        })
    };
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| format!("bind {addr}: {e}"))?;
    tracing::info!(%addr, streams = service.stream_ids().len(), "listening");
    let result = axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown_signal())
        .await
        .map_err(|e| e.to_string());
    reaper.abort();
    result
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
        {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
