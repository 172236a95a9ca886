use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use super::{ReviewError, ReviewStore};
use crate::hashing::sniff_image_mime;
use crate::metrics::ReviewRecord;

const PLACEHOLDER_PAGE: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>Review</title></head>\n<body><h1>Review service</h1><p>No UI bundle installed. The JSON API is available under <code>/runs</code>.</p></body></html>\n";

#[derive(Clone)]
struct AppState {
    store: Arc<ReviewStore>,
    ui_dir: Option<PathBuf>,
}

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        let status = match &self {
            ReviewError::UnknownRun(_) | ReviewError::UnknownItem { .. } => StatusCode::NOT_FOUND,
            ReviewError::InvalidKnowledgePoint(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ReviewError::InvalidRecord(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({ "error": self.name(), "message": self.to_string() });
        (status, Json(body)).into_response()
    }
}

fn bad_request(message: String) -> Response {
    let body = json!({ "error": "BadRequest", "message": message });
    (StatusCode::BAD_REQUEST, Json(body)).into_response()
}

fn not_found(what: &str) -> Response {
    let body = json!({ "error": "NotFound", "message": what });
    (StatusCode::NOT_FOUND, Json(body)).into_response()
}

/// HTTP API over a review store. Static files are served from `ui_dir`
/// when given, with a built-in page at `/` otherwise.
pub fn router(store: Arc<ReviewStore>, ui_dir: Option<PathBuf>) -> Router {
    Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{id}/pending", get(pending))
        .route("/runs/{id}/metrics", get(metrics))
        .route("/reviews", post(submit))
        .route("/images/{item_id}", get(image))
        .fallback(get(static_file))
        .with_state(AppState { store, ui_dir })
}

pub async fn serve(store: Arc<ReviewStore>, addr: SocketAddr, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn list_runs(State(app): State<AppState>) -> Response {
    Json(app.store.runs()).into_response()
}

#[derive(Deserialize)]
struct PendingQuery {
    reviewer: Option<String>,
}

async fn pending(
    State(app): State<AppState>,
    UrlPath(run_id): UrlPath<String>,
    Query(q): Query<PendingQuery>,
) -> Response {
    let Some(reviewer) = q.reviewer.filter(|r| !r.trim().is_empty()) else {
        return bad_request("query parameter `reviewer` is required".into());
    };
    match app.store.list_pending(&run_id, &reviewer) {
        Ok(tasks) => Json(tasks).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn metrics(State(app): State<AppState>, UrlPath(run_id): UrlPath<String>) -> Response {
    match app.store.get_live_metrics(&run_id) {
        Ok(summary) => Json(summary).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn submit(State(app): State<AppState>, body: axum::body::Bytes) -> Response {
    let record: ReviewRecord = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(format!("malformed review: {e}")),
    };
    let store = app.store.clone();
    match tokio::task::spawn_blocking(move || store.submit_review(record)).await {
        Ok(Ok(ack)) => Json(ack).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ReviewError::Io(std::io::Error::other(e.to_string())).into_response(),
    }
}

async fn image(State(app): State<AppState>, UrlPath(item_id): UrlPath<String>) -> Response {
    let Some(path) = app.store.image_path(&item_id) else {
        return not_found(&format!("no test item `{item_id}`"));
    };
    match std::fs::read(&path) {
        Ok(bytes) => {
            let mime = sniff_image_mime(&bytes).unwrap_or("application/octet-stream");
            ([(header::CONTENT_TYPE, mime)], bytes).into_response()
        }
        Err(_) => not_found(&format!("image for `{item_id}` is unreadable")),
    }
}

async fn static_file(State(app): State<AppState>, uri: Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    if let Some(dir) = &app.ui_dir {
        if let Some(path) = confined(dir, rel) {
            if let Ok(bytes) = std::fs::read(&path) {
                return ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response();
            }
        }
    }
    if rel == "index.html" {
        return Html(PLACEHOLDER_PAGE).into_response();
    }
    not_found(uri.path())
}

/// Joins `rel` under `dir`, refusing anything that could escape it.
fn confined(dir: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel);
    if rel.components().all(|c| matches!(c, Component::Normal(_))) {
        Some(dir.join(rel))
    } else {
        None
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    }
}
