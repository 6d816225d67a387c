//! HTTP front end over [`csdmt_core::service`].

use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::info;
use tower_http::cors::CorsLayer;

use csdmt_core::service::{handle_request, ApiError, ApiRequest, ModelRegistry, Operation, MAX_IMAGE_BYTES};

use crate::ServeArgs;

/// Room for a source, three references and an edited reference, base64
/// encoded, plus their parsing maps.
const BODY_LIMIT: usize = 12 * MAX_IMAGE_BYTES;

struct ErrorResponse(ApiError);

impl IntoResponse for ErrorResponse {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0)).into_response()
    }
}

async fn health(State(reg): State<Arc<ModelRegistry>>) -> Response {
    Json(reg.health()).into_response()
}

async fn reload(State(reg): State<Arc<ModelRegistry>>) -> Response {
    let r = tokio::task::spawn_blocking(move || reg.reload().map(|_| reg.health())).await;
    match r {
        Ok(Ok(h)) => Json(h).into_response(),
        Ok(Err(e)) => ErrorResponse(ApiError::new(500, "reload-failed", "reload", e.to_string())).into_response(),
        Err(e) => ErrorResponse(ApiError::new(500, "internal", "reload", e.to_string())).into_response(),
    }
}

async fn operation(reg: Arc<ModelRegistry>, op: Operation, body: Bytes) -> Response {
    let req: ApiRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return ErrorResponse(ApiError::new(400, "bad-json", "request", e.to_string())).into_response(),
    };
    let r = tokio::task::spawn_blocking(move || handle_request(&req, Some(op), &reg)).await;
    match r {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => ErrorResponse(e).into_response(),
        Err(e) => ErrorResponse(ApiError::new(500, "internal", op.path(), e.to_string())).into_response(),
    }
}

/// All routes over a shared registry.
pub fn router(registry: Arc<ModelRegistry>) -> Router {
    let mut app = Router::new().route("/health", get(health)).route("/reload", post(reload));
    for op in Operation::ALL {
        app = app.route(
            op.path(),
            post(move |State(reg): State<Arc<ModelRegistry>>, body: Bytes| operation(reg, op, body)),
        );
    }
    app.layer(DefaultBodyLimit::max(BODY_LIMIT))
        .layer(CorsLayer::permissive())
        .with_state(registry)
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let registry = Arc::new(ModelRegistry::load(&a.checkpoints, a.size)?);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .with_context(|| format!("bad listen address {}:{}", a.host, a.port))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting the async runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        info!("serving {:?} on http://{}", registry.health().models, listener.local_addr()?);
        axum::serve(listener, router(registry))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("http server")
    })
}
