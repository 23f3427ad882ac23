//! HTTP API over a workspace.
//!
//! Reads and short mutations take the workspace lock directly. Starting an
//! iteration predicts synchronously, then a background task waits for review
//! and runs retraining outside the lock.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use meltpool_core::imaging::encode_overlay;
use meltpool_core::workflow::{blend_overlay, AnnotationStatus, Workspace};
use meltpool_core::{CorrectionKind, CorrectionPoint, Error};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobStatus {
    Idle,
    AwaitingReview { iteration: usize },
    Training { iteration: usize },
    Failed { iteration: usize, message: String },
}

#[derive(Clone)]
pub struct AppState {
    ws: Arc<Mutex<Workspace>>,
    job: Arc<Mutex<JobStatus>>,
    poll: Duration,
}

impl AppState {
    pub fn new(ws: Workspace) -> Self {
        Self { ws: Arc::new(Mutex::new(ws)), job: Arc::new(Mutex::new(JobStatus::Idle)), poll: Duration::from_millis(200) }
    }

    pub fn with_poll_interval(mut self, poll: Duration) -> Self {
        self.poll = poll;
        self
    }

    pub fn workspace(&self) -> MutexGuard<'_, Workspace> {
        self.ws.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn job(&self) -> JobStatus {
        self.job.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn set_job(&self, s: JobStatus) {
        *self.job.lock().unwrap_or_else(|e| e.into_inner()) = s;
    }
}

pub struct ApiError(StatusCode, String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) | Error::PendingApprovals { .. } => StatusCode::CONFLICT,
            Error::Empty(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Io { .. } | Error::Integrity(_) | Error::NonFinite(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response()
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/tiles", get(list_tiles))
        .route("/api/tiles/{id}/image", get(tile_image))
        .route("/api/tiles/{id}/prediction", get(tile_prediction))
        .route("/api/tiles/{id}/overlay", get(tile_overlay))
        .route("/api/tiles/{id}/corrections", post(post_corrections))
        .route("/api/iterations", post(post_iteration))
        .route("/api/iterations/{i}", get(get_iteration))
        .route("/api/stats/{i}", get(get_stats))
        .route("/api/checkpoints", get(list_checkpoints))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct TileSummary {
    pub id: String,
    pub image_id: String,
    pub origin: (usize, usize),
    pub size: usize,
    pub status: Option<AnnotationStatus>,
    pub iteration: Option<usize>,
}

async fn list_tiles(State(s): State<AppState>) -> Json<Vec<TileSummary>> {
    let ws = s.workspace();
    let m = ws.manifest();
    Json(
        m.tiles
            .iter()
            .map(|t| {
                let a = m.annotation(&t.id);
                TileSummary {
                    id: t.id.clone(),
                    image_id: t.image_id.clone(),
                    origin: t.origin,
                    size: t.size,
                    status: a.map(|a| a.status),
                    iteration: a.map(|a| a.iteration),
                }
            })
            .collect(),
    )
}

async fn tile_image(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let ws = s.workspace();
    Ok(png(ws.tile_image(&id)?.to_png_bytes()?))
}

async fn tile_prediction(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let ws = s.workspace();
    let mask = ws.annotation_mask(&id)?;
    Ok(png(encode_overlay(&mask, &ws.config().palette).to_png_bytes()?))
}

async fn tile_overlay(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let ws = s.workspace();
    let img = ws.tile_image(&id)?;
    let mask = ws.annotation_mask(&id)?;
    Ok(png(blend_overlay(&img, &mask, &ws.config().palette, 0.5)?.to_png_bytes()?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointInput {
    pub kind: CorrectionKind,
    pub x: i64,
    pub y: i64,
    #[serde(default)]
    pub author: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectionRequest {
    pub request_id: String,
    #[serde(default)]
    pub points: Vec<PointInput>,
    #[serde(default)]
    pub approve: bool,
}

async fn post_corrections(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<CorrectionRequest>,
) -> ApiResult<Response> {
    if req.request_id.is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "request_id is required".into()));
    }
    let points: Vec<CorrectionPoint> = req
        .points
        .iter()
        .map(|p| {
            let mut c = CorrectionPoint::new(p.kind, p.x, p.y);
            c.author = p.author.clone();
            c.image_id = id.clone();
            c
        })
        .collect();
    let mut ws = s.workspace();
    let resp = ws.ingest_corrections(&id, &points, &req.request_id, req.approve)?;
    Ok(Json(resp).into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRequest {
    pub batch: Vec<String>,
    #[serde(default)]
    pub auto_approve: bool,
}

async fn post_iteration(State(s): State<AppState>, Json(req): Json<IterationRequest>) -> ApiResult<Response> {
    if matches!(s.job(), JobStatus::Training { .. }) {
        return Err(ApiError(StatusCode::CONFLICT, "a training job is running".into()));
    }
    let pending = {
        let state = s.clone();
        let batch = req.batch.clone();
        tokio::task::spawn_blocking(move || -> Result<_, Error> {
            let mut ws = state.workspace();
            let p = ws.begin_iteration(&batch)?;
            if req.auto_approve {
                for t in ws.manifest().awaiting_review() {
                    ws.ingest_corrections(&t, &[], &format!("auto-{}-{t}", p.index), true)?;
                }
            }
            Ok(p)
        })
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??
    };
    if !matches!(s.job(), JobStatus::AwaitingReview { iteration } if iteration == pending.index) {
        s.set_job(JobStatus::AwaitingReview { iteration: pending.index });
        tokio::spawn(review_then_train(s.clone(), pending.index));
    }
    Ok((StatusCode::ACCEPTED, Json(json!({ "index": pending.index, "pending": pending, "job": s.job() }))).into_response())
}

async fn review_then_train(s: AppState, index: usize) {
    let job = loop {
        let ready = {
            let ws = s.workspace();
            if ws.manifest().pending.as_ref().map(|p| p.index) != Some(index) {
                s.set_job(JobStatus::Idle);
                return;
            }
            ws.manifest().awaiting_review().is_empty().then(|| ws.prepare_retrain())
        };
        match ready {
            Some(Ok(job)) => break job,
            Some(Err(e)) => {
                s.set_job(JobStatus::Failed { iteration: index, message: e.to_string() });
                return;
            }
            None => tokio::time::sleep(s.poll).await,
        }
    };
    s.set_job(JobStatus::Training { iteration: index });
    let outcome = tokio::task::spawn_blocking(move || job.run()).await;
    // the job status changes while the workspace is still locked, so no
    // reader sees a completed iteration with a training job
    let mut ws = s.workspace();
    let result = match outcome {
        Ok(Ok(out)) => ws.finish_iteration(out).map(|_| ()),
        Ok(Err(e)) => Err(e),
        Err(e) => Err(Error::Conflict(format!("training task aborted: {e}"))),
    };
    match result {
        Ok(()) => s.set_job(JobStatus::Idle),
        Err(e) => {
            log::error!("iteration {index} failed: {e}");
            s.set_job(JobStatus::Failed { iteration: index, message: e.to_string() });
        }
    }
}

async fn get_iteration(State(s): State<AppState>, Path(i): Path<usize>) -> ApiResult<Response> {
    let job = s.job();
    let ws = s.workspace();
    let m = ws.manifest();
    if let Some(rec) = m.iterations.get(i) {
        return Ok(Json(json!({ "status": "complete", "record": rec })).into_response());
    }
    match &m.pending {
        Some(p) if p.index == i => {
            let awaiting = m.awaiting_review();
            let status = if awaiting.is_empty() { "training" } else { "awaiting_review" };
            Ok(Json(json!({ "status": status, "pending": p, "awaiting": awaiting, "job": job })).into_response())
        }
        _ => Err(Error::NotFound(format!("iteration {i}")).into()),
    }
}

async fn get_stats(State(s): State<AppState>, Path(i): Path<usize>) -> ApiResult<Response> {
    let state = s.clone();
    let report = tokio::task::spawn_blocking(move || {
        let mut ws = state.workspace();
        ws.stored_statistics(i).or_else(|_| ws.run_statistics(i))
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(report).into_response())
}

async fn list_checkpoints(State(s): State<AppState>) -> Json<serde_json::Value> {
    let ws = s.workspace();
    let m = ws.manifest();
    let latest = m.iterations.last().map(|it| &it.rankings);
    Json(json!({ "checkpoints": m.checkpoints, "latest_rankings": latest }))
}
