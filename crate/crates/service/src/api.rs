//! HTTP routes over a shared [`Coordinator`].

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use refinery_core::triage::Candidate;
use refinery_core::{AnnotationSource, DatasetVersion, GraspPose};
use serde::{Deserialize, Serialize};

use crate::coordinator::{Coordinator, DecisionRequest, ServiceError};

/// Read-only view of the version under review; served without locking.
#[derive(Debug)]
pub struct Snapshot {
    pub version: DatasetVersion,
    /// Relative image paths resolve against this directory.
    pub image_root: Option<PathBuf>,
    candidates: HashMap<String, (u64, Option<Candidate>)>,
    iteration: u32,
}

#[derive(Clone)]
pub struct AppState {
    coordinator: Arc<Mutex<Coordinator>>,
    snapshot: Arc<Snapshot>,
}

impl AppState {
    pub fn new(coordinator: Coordinator, version: DatasetVersion, image_root: Option<PathBuf>) -> Self {
        let candidates = coordinator
            .items()
            .iter()
            .map(|i| (i.image_id.clone(), (i.item_id, i.candidate.clone())))
            .collect();
        let snapshot = Snapshot {
            version,
            image_root,
            candidates,
            iteration: coordinator.iteration(),
        };
        Self {
            coordinator: Arc::new(Mutex::new(coordinator)),
            snapshot: Arc::new(snapshot),
        }
    }

    pub fn coordinator(&self) -> MutexGuard<'_, Coordinator> {
        self.coordinator.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownItem(_) | ServiceError::UnknownImage(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Queue { .. } | ServiceError::Ledger(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (
            status,
            Json(ErrorBody {
                error: self.to_string(),
            }),
        )
            .into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/queue/next", get(queue_next))
        .route("/api/queue/release", post(queue_release))
        .route("/api/decisions", post(submit_decision))
        .route("/api/images/{id}", get(image_bytes))
        .route("/api/overlays/{id}", get(overlay))
        .route("/api/stats", get(stats))
        .route("/api/iterations", get(iterations))
        .with_state(state)
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    operator: String,
}

async fn queue_next(State(s): State<AppState>, Query(q): Query<NextQuery>) -> Result<Response, ServiceError> {
    match s.coordinator().lease_next(&q.operator)? {
        Some(leased) => Ok(Json(leased).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

#[derive(Debug, Deserialize)]
struct ReleaseRequest {
    item_id: u64,
    operator_id: String,
}

async fn queue_release(State(s): State<AppState>, Json(r): Json<ReleaseRequest>) -> Result<StatusCode, ServiceError> {
    s.coordinator().release(r.item_id, &r.operator_id)?;
    Ok(StatusCode::OK)
}

async fn submit_decision(
    State(s): State<AppState>,
    Json(req): Json<DecisionRequest>,
) -> Result<Response, ServiceError> {
    let ack = s.coordinator().submit(&req)?;
    Ok(Json(ack).into_response())
}

async fn image_bytes(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let rec = s
        .snapshot
        .version
        .get(&id)
        .ok_or_else(|| ServiceError::UnknownImage(id.clone()))?;
    let path = match &s.snapshot.image_root {
        Some(root) if rec.rgb_path.is_relative() => root.join(&rec.rgb_path),
        _ => rec.rgb_path.clone(),
    };
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| ServiceError::UnknownImage(format!("{id} (no image file)")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    GroundTruth,
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub role: Role,
    pub corners: [[f64; 2]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<AnnotationSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub image_id: String,
    pub image_url: String,
    pub width: u32,
    pub height: u32,
    pub iteration: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<u64>,
    pub polygons: Vec<Polygon>,
}

fn corners(g: &GraspPose) -> [[f64; 2]; 4] {
    g.rectangle().corners.map(|p| [p.x, p.y])
}

async fn overlay(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<Overlay>, ServiceError> {
    let snap = &s.snapshot;
    let rec = snap
        .version
        .get(&id)
        .ok_or_else(|| ServiceError::UnknownImage(id.clone()))?;
    let mut polygons: Vec<Polygon> = rec
        .annotations
        .iter()
        .map(|a| Polygon {
            role: Role::GroundTruth,
            corners: corners(&a.pose),
            source: Some(a.source),
            prediction_id: None,
        })
        .collect();
    let queued = snap.candidates.get(&id);
    if let Some((_, Some(c))) = queued {
        polygons.push(Polygon {
            role: Role::Prediction,
            corners: corners(&c.pose),
            source: None,
            prediction_id: Some(c.prediction_id.clone()),
        });
    }
    Ok(Json(Overlay {
        image_url: format!("/api/images/{id}"),
        image_id: id,
        width: rec.width,
        height: rec.height,
        iteration: snap.iteration,
        item_id: queued.map(|(i, _)| *i),
        polygons,
    }))
}

async fn stats(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.coordinator().stats())
}

async fn iterations(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.coordinator().iterations())
}
