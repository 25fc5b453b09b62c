//! HTTP chat service (API version 1).
//!
//! | method | path            | body                              | reply                                            |
//! |--------|-----------------|-----------------------------------|--------------------------------------------------|
//! | POST   | `/session`      | none                              | 201 `{session_id}`                               |
//! | POST   | `/chat`         | `{session_id, message, k?}`       | 200 `{response, items, turn_index, spans, latency_ms}` |
//! | GET    | `/health`       | none                              | 200 `{status, checkpoint_hash, sessions, api_version}` |
//! | DELETE | `/session/{id}` | none                              | 204                                              |
//!
//! Errors carry `{error}` with 400 (bad request), 404 (unknown session) or
//! 500.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use recindial::chat::SessionSnapshot;
use recindial::vpdecode::RenderedSpan;
use recindial::{ChatEngine, ChatItem, Error};

use crate::{io_err, CliError, CliResult};

pub const API_VERSION: u32 = 1;

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<ChatEngine>,
    pub checkpoint_hash: Arc<str>,
    /// Bounds concurrent decodes.
    pub permits: Arc<Semaphore>,
}

impl AppState {
    pub fn new(engine: Arc<ChatEngine>, checkpoint_hash: impl Into<Arc<str>>, workers: usize) -> Self {
        AppState { engine, checkpoint_hash: checkpoint_hash.into(), permits: Arc::new(Semaphore::new(workers.max(1))) }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatRequest {
    pub session_id: String,
    pub message: String,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatResponse {
    pub response: String,
    pub items: Vec<ChatItem>,
    pub turn_index: usize,
    pub spans: Vec<RenderedSpan>,
    pub latency_ms: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_hash: String,
    pub sessions: usize,
    pub api_version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::UnknownSession(_) => StatusCode::NOT_FOUND,
            Error::Config(_) | Error::PrefixTooLong { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}", delete(delete_session))
        .route("/chat", post(chat))
        .route("/health", get(health))
        .with_state(state)
}

async fn create_session(State(s): State<AppState>) -> (StatusCode, Json<SessionCreated>) {
    let session_id = s.engine.create_session();
    log::info!("session {session_id} created");
    (StatusCode::CREATED, Json(SessionCreated { session_id }))
}

async fn delete_session(State(s): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    s.engine.delete_session(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        checkpoint_hash: s.checkpoint_hash.to_string(),
        sessions: s.engine.len(),
        api_version: API_VERSION,
    })
}

async fn chat(
    State(s): State<AppState>,
    req: Result<Json<ChatRequest>, JsonRejection>,
) -> Result<Json<ChatResponse>, ApiError> {
    let Json(req) = req.map_err(|r| ApiError(r.status(), r.body_text()))?;
    if req.message.trim().is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "message is empty".into()));
    }
    if req.k == Some(0) {
        return Err(ApiError(StatusCode::BAD_REQUEST, "k must be at least 1".into()));
    }
    s.engine.session(&req.session_id)?;
    let _permit = s
        .permits
        .clone()
        .acquire_owned()
        .await
        .map_err(|_| ApiError(StatusCode::SERVICE_UNAVAILABLE, "shutting down".into()))?;
    let engine = s.engine.clone();
    let turn = tokio::task::spawn_blocking(move || engine.handle_message(&req.session_id, &req.message, req.k))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(ChatResponse {
        response: turn.response,
        items: turn.items,
        turn_index: turn.turn_index,
        spans: turn.spans,
        latency_ms: turn.latency_ms,
    }))
}

pub struct ServeOptions {
    pub host: String,
    pub port: u16,
    pub workers: usize,
    pub idle: Duration,
    pub sessions_file: Option<PathBuf>,
}

fn load_sessions(engine: &ChatEngine, path: &std::path::Path) -> CliResult<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let snaps: Vec<SessionSnapshot> = serde_json::from_str(&text).map_err(Error::from)?;
    engine.restore(&snaps)?;
    log::info!("restored {} sessions from {}", snaps.len(), path.display());
    Ok(())
}

fn save_sessions(engine: &ChatEngine, path: &std::path::Path) -> CliResult<()> {
    let json = serde_json::to_string(&engine.snapshot()).map_err(Error::from)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, json).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Serves until Ctrl-C, expiring idle sessions in the background.
pub fn serve(engine: Arc<ChatEngine>, checkpoint_hash: String, opts: ServeOptions) -> CliResult<()> {
    if let Some(path) = &opts.sessions_file {
        load_sessions(&engine, path)?;
    }
    let addr: SocketAddr = format!("{}:{}", opts.host, opts.port)
        .parse()
        .map_err(|_| CliError::Usage(format!("bad listen address {}:{}", opts.host, opts.port)))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| io_err(std::path::Path::new("tokio runtime"), e))?;
    let state = AppState::new(engine.clone(), checkpoint_hash, opts.workers);
    let shared = engine.clone();
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| io_err(std::path::Path::new(&addr.to_string()), e))?;
        let local = listener.local_addr().map_err(|e| io_err(std::path::Path::new(&addr.to_string()), e))?;
        println!("listening on http://{local}");
        let sweeper = {
            let engine = shared;
            let every = (opts.idle / 4).clamp(Duration::from_secs(1), Duration::from_secs(60));
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(every);
                loop {
                    tick.tick().await;
                    let dropped = engine.expire_idle();
                    if dropped > 0 {
                        log::info!("expired {dropped} idle sessions");
                    }
                }
            })
        };
        let result = axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await;
        sweeper.abort();
        result.map_err(|e| io_err(std::path::Path::new(&local.to_string()), e))
    })?;
    if let Some(path) = &opts.sessions_file {
        save_sessions(&engine, path)?;
        log::info!("saved {} sessions to {}", engine.len(), path.display());
    }
    Ok(())
}
