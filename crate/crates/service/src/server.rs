use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::Mutex;

use crate::session::{RenderError, RenderRequest, RequestError, Session};

pub const MILLIS_HEADER: &str = "x-render-millis";
pub const WARNING_HEADER: &str = "x-render-warning";

#[derive(Clone)]
struct AppState {
    session: Arc<Session>,
    // tokio's mutex wakes waiters in arrival order, which gives the FIFO queue
    queue: Arc<Mutex<()>>,
}

pub fn router(session: Arc<Session>) -> Router {
    let state = AppState { session, queue: Arc::new(Mutex::new(())) };
    Router::new()
        .route("/health", get(health))
        .route("/meta", get(meta))
        .route("/render", post(render))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn meta(State(state): State<AppState>) -> Response {
    Json(state.session.meta()).into_response()
}

fn bad_request(err: &RequestError) -> Response {
    (StatusCode::BAD_REQUEST, Json(serde_json::json!({ "field": err.field, "error": err.message }))).into_response()
}

async fn render(State(state): State<AppState>, body: Bytes) -> Response {
    let req = match RenderRequest::from_json(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(&e),
    };
    let _slot = state.queue.lock().await;
    let session = state.session.clone();
    let started = Instant::now();
    let result = tokio::task::spawn_blocking(move || session.render(&req)).await;
    let millis = started.elapsed().as_millis();
    match result {
        Ok(Ok(out)) => {
            let mut resp = (StatusCode::OK, [(header::CONTENT_TYPE, "image/png")], out.png).into_response();
            let headers = resp.headers_mut();
            headers.insert(MILLIS_HEADER, HeaderValue::from(millis as u64));
            for w in &out.warnings {
                if let Ok(v) = HeaderValue::from_str(w) {
                    headers.append(WARNING_HEADER, v);
                }
            }
            resp
        }
        Ok(Err(RenderError::Request(e))) => bad_request(&e),
        Ok(Err(RenderError::Internal(e))) => {
            (StatusCode::INTERNAL_SERVER_ERROR, Json(serde_json::json!({ "error": e.to_string() }))).into_response()
        }
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(serde_json::json!({ "error": e.to_string() }))).into_response(),
    }
}

/// Serves `session` on `addr` until the process ends. `on_bound` receives the
/// actual address, useful when binding port 0.
pub async fn serve(session: Arc<Session>, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(session)).await
}
