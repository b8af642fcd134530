//! HTTP service over a model directory: `GET /info`, `POST /render` and
//! `GET /trajectories`.

use std::sync::Arc;
use std::time::Instant;

use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::dataset::AppearanceKey;
use crate::error::Error;
use crate::nav::GuidanceTrajectory;
use crate::pipeline::{render_request, ModelStore, RenderRequest};

pub struct ServiceState {
    pub store: ModelStore,
    pub config: PipelineConfig,
    pub trajectories: Vec<GuidanceTrajectory>,
}

#[derive(Debug, Serialize)]
struct BlockInfo {
    id: String,
    min: [f64; 2],
    max: [f64; 2],
    trained: bool,
    model_id: Option<String>,
    sequences: Vec<AppearanceKey>,
}

#[derive(Debug, Serialize)]
struct Info<'a> {
    config: &'a PipelineConfig,
    blocks: Vec<BlockInfo>,
    trajectories: Vec<u32>,
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::NotFound(_) | Error::UnknownSequence(_) | Error::UnknownCamera(_) => StatusCode::NOT_FOUND,
        Error::Stage { source, .. } => status_of(source),
        Error::Io(_) | Error::Image(_) | Error::Diverged { .. } | Error::Checkpoint(_) => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
        _ => StatusCode::BAD_REQUEST,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.0.to_string() });
        (status_of(&self.0), Json(body)).into_response()
    }
}

async fn info(State(state): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    let blocks = state
        .store
        .blocks()
        .iter()
        .map(|b| {
            let (min, max) = b.bounds();
            let model = state.store.get(&b.id).ok();
            BlockInfo {
                id: b.id.clone(),
                min,
                max,
                trained: model.is_some(),
                model_id: model.map(|(_, m)| m.model_id.clone()),
                sequences: model.map(|(f, _)| f.sequences().collect()).unwrap_or_default(),
            }
        })
        .collect();
    let info = Info {
        config: &state.config,
        blocks,
        trajectories: state.trajectories.iter().map(|t| t.trip).collect(),
    };
    Json(serde_json::to_value(info).unwrap_or_default())
}

async fn trajectories(State(state): State<Arc<ServiceState>>) -> Json<Vec<GuidanceTrajectory>> {
    Json(state.trajectories.clone())
}

fn header_value(s: &str) -> HeaderValue {
    HeaderValue::from_str(s).unwrap_or_else(|_| HeaderValue::from_static("invalid"))
}

async fn render(State(state): State<Arc<ServiceState>>, Json(req): Json<RenderRequest>) -> Result<Response, ApiError> {
    let start = Instant::now();
    let result = tokio::task::spawn_blocking(move || render_request(&state.store, &req, &state.config, &state.trajectories))
        .await
        .map_err(|e| Error::InvalidArgument(format!("render task: {e}")))??;
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    headers.insert("x-render-ms", header_value(&start.elapsed().as_millis().to_string()));
    headers.insert("x-model-id", header_value(&result.model_id));
    headers.insert("x-block-id", header_value(&result.block_id));
    headers.insert("x-seed", header_value(&result.seed.to_string()));
    Ok((headers, result.png).into_response())
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/info", get(info))
        .route("/render", post(render))
        .route("/trajectories", get(trajectories))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<ServiceState>, bind: &str) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
