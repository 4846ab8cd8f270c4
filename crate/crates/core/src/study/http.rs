//! JSON-over-HTTP front of [`Study`].

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::oneshot;

use super::{StrategyAnswers, Study, StudyError};
use crate::oracle::ImageRef;

#[derive(Clone)]
struct AppState {
    study: Arc<Mutex<Study>>,
    root: PathBuf,
    static_dir: Option<PathBuf>,
}

impl IntoResponse for StudyError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            StudyError::StudyComplete => (StatusCode::GONE, "study_complete"),
            StudyError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            StudyError::Expired(_) => (StatusCode::GONE, "session_expired"),
            StudyError::Conflict { .. } => (StatusCode::CONFLICT, "conflict"),
            StudyError::Invalid(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
            StudyError::Dataset(crate::dataset::DatasetError::InvalidRating(_))
            | StudyError::Dataset(crate::dataset::DatasetError::UnknownPair(_)) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid")
            }
            StudyError::Dataset(crate::dataset::DatasetError::DuplicateRating { .. }) => {
                (StatusCode::CONFLICT, "conflict")
            }
            StudyError::Dataset(_) | StudyError::Setup(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let mut body = json!({ "error": code, "message": self.to_string() });
        match &self {
            StudyError::StudyComplete => body["complete"] = json!(true),
            StudyError::Conflict { expected_pair: Some(p), .. } => body["expected_pair_id"] = json!(p),
            _ => {}
        }
        (status, Json(body)).into_response()
    }
}

async fn with_study<T, F>(state: &AppState, f: F) -> Result<T, StudyError>
where
    T: Send + 'static,
    F: FnOnce(&mut Study) -> Result<T, StudyError> + Send + 'static,
{
    let study = state.study.clone();
    tokio::task::spawn_blocking(move || f(&mut study.lock().unwrap_or_else(|p| p.into_inner())))
        .await
        .map_err(|e| StudyError::Setup(format!("handler panicked: {e}")))?
}

#[derive(Debug, Default, Deserialize)]
struct OpenBody {
    #[serde(default)]
    demographics: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct RatingBody {
    pair_id: String,
    similarity: i64,
    same_person: bool,
}

async fn open_session(State(st): State<AppState>, body: Option<Json<OpenBody>>) -> Response {
    let demographics = body.map(|Json(b)| b.demographics).unwrap_or_default();
    match with_study(&st, move |s| s.open_session(demographics)).await {
        Ok(o) => (StatusCode::CREATED, Json(o)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn next_pair(State(st): State<AppState>, Path(id): Path<String>) -> Response {
    match with_study(&st, move |s| s.next_pair(&id)).await {
        Ok(n) => Json(n).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn rating(State(st): State<AppState>, Path(id): Path<String>, Json(b): Json<RatingBody>) -> Response {
    match with_study(&st, move |s| s.submit_rating(&id, &b.pair_id, b.similarity, b.same_person)).await {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn strategy(State(st): State<AppState>, Path(id): Path<String>, Json(b): Json<StrategyAnswers>) -> Response {
    match with_study(&st, move |s| s.submit_strategy(&id, b)).await {
        Ok(()) => Json(json!({})).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn progress(State(st): State<AppState>) -> Response {
    match with_study(&st, |s| s.progress()).await {
        Ok(p) => Json(p).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn health(State(st): State<AppState>) -> Response {
    let pairs = st.study.lock().map(|s| s.pairs().len()).unwrap_or(0);
    Json(json!({ "status": "ok", "pairs": pairs })).into_response()
}

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn send_file(path: PathBuf) -> Response {
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], Body::from(bytes)).into_response(),
        Err(_) => (StatusCode::NOT_FOUND, Json(json!({ "error": "not_found" }))).into_response(),
    }
}

async fn image(State(st): State<AppState>, Path(rest): Path<String>) -> Response {
    match ImageRef::new(format!("images/{rest}")) {
        Ok(r) => send_file(r.resolve(&st.root)).await,
        Err(_) => (StatusCode::BAD_REQUEST, Json(json!({ "error": "bad_request" }))).into_response(),
    }
}

async fn static_file(State(st): State<AppState>, uri: axum::http::Uri) -> Response {
    let Some(dir) = &st.static_dir else {
        return (StatusCode::NOT_FOUND, Json(json!({ "error": "not_found" }))).into_response();
    };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    match ImageRef::new(rel) {
        Ok(r) => send_file(r.resolve(dir)).await,
        Err(_) => (StatusCode::BAD_REQUEST, Json(json!({ "error": "bad_request" }))).into_response(),
    }
}

/// Routes of the study service. `static_dir`, when given, is served for any
/// other GET path.
pub fn router(study: Arc<Mutex<Study>>, static_dir: Option<PathBuf>) -> Router {
    let root = study.lock().map(|s| s.root().to_path_buf()).unwrap_or_default();
    let state = AppState { study, root, static_dir };
    Router::new()
        .route("/api/health", get(health))
        .route("/api/session", post(open_session))
        .route("/api/session/{id}/next", get(next_pair))
        .route("/api/session/{id}/rating", post(rating))
        .route("/api/session/{id}/strategy", post(strategy))
        .route("/api/admin/progress", get(progress))
        .route("/images/{*path}", get(image))
        .fallback(get(static_file))
        .with_state(state)
}

/// A study server on a background thread with its own runtime.
pub struct StudyServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl StudyServer {
    pub fn start(study: Arc<Mutex<Study>>, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<Self> {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let app = router(study, static_dir);
        let (tx, rx) = oneshot::channel();
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let result = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
                if let Err(e) = result {
                    log::error!("study server stopped: {e}");
                }
            })
        });
        Ok(Self { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for StudyServer {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}
