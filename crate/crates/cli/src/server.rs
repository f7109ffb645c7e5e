//! HTTP API over one reader session.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use aisdet::candidate::Candidate;
use aisdet::readerstudy::{default_mark_box, CasePhase, Mark, ReaderError, Session};
use aisdet::volume::{BoundingBox2D, CaseAnnotation, NormalizedVolume};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub struct AppState {
    pub session: Mutex<Session>,
    pub volumes: BTreeMap<String, NormalizedVolume>,
    pub ground_truth: Vec<CaseAnnotation>,
}

pub type Shared = Arc<AppState>;

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }
}

impl From<ReaderError> for ApiError {
    fn from(e: ReaderError) -> Self {
        let status = match &e {
            ReaderError::UnknownCase(_) | ReaderError::UnknownMark { .. } => StatusCode::NOT_FOUND,
            ReaderError::InvalidBox(_) => StatusCode::BAD_REQUEST,
            ReaderError::Io(_) | ReaderError::Json(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::CONFLICT,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Serialize)]
struct CaseSummary {
    id: String,
    phase: CasePhase,
    n_slices: usize,
    width: usize,
    height: usize,
    n_marks: usize,
}

#[derive(Serialize)]
struct CaseView<'a> {
    id: &'a str,
    phase: CasePhase,
    marks: &'a [Mark],
    /// Present only after disclosure.
    software: Option<&'a [Candidate]>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MarkRequest {
    Box {
        #[serde(rename = "box")]
        bbox: BoundingBox2D,
    },
    Point {
        z: usize,
        x: f64,
        y: f64,
    },
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/cases", get(list_cases))
        .route("/cases/{id}/slices/{z}", get(slice_png))
        .route("/cases/{id}/state", get(case_state))
        .route("/cases/{id}/marks", post(add_mark))
        .route("/cases/{id}/marks/{mark_id}", delete(remove_mark))
        .route("/cases/{id}/disclose", post(disclose))
        .route("/cases/{id}/done", post(done))
        .route("/finalize", post(finalize))
        .with_state(state)
}

fn lock(state: &AppState) -> std::sync::MutexGuard<'_, Session> {
    // A panic while holding the lock cannot leave the session half-applied:
    // events are validated before they mutate anything.
    state.session.lock().unwrap_or_else(|p| p.into_inner())
}

async fn list_cases(State(state): State<Shared>) -> ApiResult<Json<Vec<CaseSummary>>> {
    let s = lock(&state);
    let out = s
        .case_ids()
        .iter()
        .map(|id| {
            let c = s.case(id)?;
            let [w, h, nz] = state.volumes.get(id).map(|v| v.dims()).unwrap_or([0, 0, 0]);
            Ok(CaseSummary { id: id.clone(), phase: c.phase, n_slices: nz, width: w, height: h, n_marks: c.marks.len() })
        })
        .collect::<Result<Vec<_>, ReaderError>>()?;
    Ok(Json(out))
}

/// 8-bit grayscale PNG of a windowed slice.
pub fn encode_slice_png(vol: &NormalizedVolume, z: usize) -> Vec<u8> {
    let [w, h, _] = vol.dims();
    let pixels: Vec<u8> = vol.slice(z).data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().expect("in-memory png header");
    writer.write_image_data(&pixels).expect("in-memory png data");
    writer.finish().expect("in-memory png");
    out
}

async fn slice_png(State(state): State<Shared>, Path((id, z)): Path<(String, usize)>) -> ApiResult<Response> {
    let vol = state.volumes.get(&id).ok_or_else(|| ApiError::from(ReaderError::UnknownCase(id.clone())))?;
    if z >= vol.nz() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "SliceOutOfRange", format!("slice {z} outside 0..{}", vol.nz())));
    }
    Ok(([(header::CONTENT_TYPE, "image/png")], encode_slice_png(vol, z)).into_response())
}

async fn case_state(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = lock(&state);
    let c = s.case(&id)?;
    let view = CaseView { id: &id, phase: c.phase, marks: &c.marks, software: s.visible_software(&id)? };
    Ok(Json(view).into_response())
}

async fn add_mark(State(state): State<Shared>, Path(id): Path<String>, Json(req): Json<MarkRequest>) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let bbox = match req {
        MarkRequest::Box { bbox } => bbox,
        MarkRequest::Point { z, x, y } => default_mark_box(z, x, y),
    };
    let mark_id = lock(&state).add_mark(&id, bbox)?;
    Ok((StatusCode::CREATED, Json(json!({ "mark_id": mark_id, "box": bbox }))))
}

async fn remove_mark(State(state): State<Shared>, Path((id, mark_id)): Path<(String, u64)>) -> ApiResult<StatusCode> {
    lock(&state).remove_mark(&id, mark_id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn disclose(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let candidates = lock(&state).disclose(&id)?;
    Ok(Json(json!({ "software": candidates })))
}

async fn done(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    lock(&state).done(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn finalize(State(state): State<Shared>) -> ApiResult<Response> {
    let report = lock(&state).finalize(&state.ground_truth)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], report.to_json()).into_response())
}
