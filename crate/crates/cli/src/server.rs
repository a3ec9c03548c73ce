//! HTTP service for the annotation tool. Bodies are JSON except frames,
//! which are lossless 8-bit grayscale PNG.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use echoqa::dataset::{load_clip, load_frame, quantize, ClipEntry, DatasetManifest, Split};
use echoqa::metrics::{interobserver_disparity, Disparity, Frame};
use echoqa::model::Model;
use echoqa::rubric::{Attribute, AttributeScores, Bands, Rubric, View};
use serde::{Deserialize, Serialize};

use crate::store::{AnnotationRecord, AnnotationRequest, AnnotationStore, StoreError};

pub struct AppState {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub rubric: Rubric,
    pub model: Option<Arc<Model>>,
    pub store: AnnotationStore,
    predictions: Mutex<HashMap<String, AttributeScores>>,
}

impl AppState {
    pub fn new(
        root: PathBuf,
        manifest: DatasetManifest,
        rubric: Rubric,
        model: Option<Model>,
        store: AnnotationStore,
    ) -> Self {
        Self {
            root,
            manifest,
            rubric,
            model: model.map(Arc::new),
            store,
            predictions: Mutex::new(HashMap::new()),
        }
    }

    fn entry(&self, id: &str) -> Result<&ClipEntry, ApiError> {
        self.manifest
            .entry(id)
            .ok_or_else(|| ApiError::not_found(format!("no clip {id:?}")))
    }
}

/// Structured error body: `{"error": code, "message": .., "fields": [..]}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: Option<StatusCode>,
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: Some(status),
            error: code.into(),
            message: message.into(),
            fields: Vec::new(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status.unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Invalid(fields) => ApiError {
                fields,
                ..ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", "annotation rejected")
            },
            StoreError::Io(m) => ApiError::internal(m),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/clips", get(list_clips))
        .route("/clips/{id}", get(get_clip))
        .route("/clips/{id}/frames/{index}", get(get_frame))
        .route("/clips/{id}/scores", get(get_scores))
        .route("/clips/{id}/annotations", get(get_annotations).post(post_annotation))
        .route("/disparity", get(get_disparity))
        .route("/rubric", get(get_rubric))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClipSummary {
    pub id: String,
    pub view: View,
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub split: Option<Split>,
    pub labels: AttributeScores,
}

fn summary(state: &AppState, e: &ClipEntry) -> ClipSummary {
    ClipSummary {
        id: e.id.clone(),
        view: e.view,
        width: e.width,
        height: e.height,
        frame_count: e.frames.len(),
        split: state.manifest.split.as_ref().and_then(|s| s.of(&e.id)),
        labels: e.labels,
    }
}

async fn list_clips(State(state): State<Arc<AppState>>) -> Json<Vec<ClipSummary>> {
    Json(state.manifest.clips.iter().map(|e| summary(&state, e)).collect())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClipDetail {
    #[serde(flatten)]
    pub summary: ClipSummary,
    pub provenance: String,
    /// Paths of the frame endpoints, in playback order.
    pub frames: Vec<String>,
}

async fn get_clip(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ClipDetail>> {
    let e = state.entry(&id)?;
    Ok(Json(ClipDetail {
        summary: summary(&state, e),
        provenance: e.provenance.clone(),
        frames: (0..e.frames.len()).map(|i| format!("/clips/{id}/frames/{i}")).collect(),
    }))
}

pub fn encode_png(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, frame.width() as u32, frame.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory png header");
        let bytes: Vec<u8> = frame.pixels().iter().map(|&v| quantize(v)).collect();
        w.write_image_data(&bytes).expect("in-memory png data");
    }
    out
}

async fn get_frame(
    State(state): State<Arc<AppState>>,
    Path((id, index)): Path<(String, String)>,
) -> ApiResult<Response> {
    let e = state.entry(&id)?.clone();
    let index: usize = index
        .parse()
        .ok()
        .filter(|i| *i < e.frames.len())
        .ok_or_else(|| ApiError::not_found(format!("clip {id} has no frame {index:?}")))?;
    let root = state.root.clone();
    let frame = tokio::task::spawn_blocking(move || load_frame(&root, &e, index))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], encode_png(&frame)).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoresResponse {
    pub clip: String,
    pub model: AttributeScores,
    pub annotations: Vec<AnnotationRecord>,
}

async fn get_scores(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ScoresResponse>> {
    let e = state.entry(&id)?.clone();
    let model = state
        .model
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_model", "no model loaded"))?;
    let cached = state.predictions.lock().unwrap_or_else(|e| e.into_inner()).get(&id).copied();
    let scores = match cached {
        Some(s) => s,
        None => {
            let st = state.clone();
            let s = tokio::task::spawn_blocking(move || -> echoqa::Result<AttributeScores> {
                let clip = load_clip(&st.root, &e)?;
                echoqa::model::forward_score(&model, &clip, &st.rubric)
            })
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?
            .map_err(|e| ApiError::internal(e.to_string()))?;
            state.predictions.lock().unwrap_or_else(|e| e.into_inner()).insert(id.clone(), s);
            s
        }
    };
    Ok(Json(ScoresResponse {
        annotations: state.store.for_clip(&id),
        clip: id,
        model: scores,
    }))
}

async fn get_annotations(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Vec<AnnotationRecord>>> {
    state.entry(&id)?;
    Ok(Json(state.store.for_clip(&id)))
}

async fn post_annotation(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> ApiResult<(StatusCode, Json<AnnotationRecord>)> {
    state.entry(&id)?;
    let req: AnnotationRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("annotation body: {e}")))?;
    let st = state.clone();
    let rec = tokio::task::spawn_blocking(move || st.store.append(&st.rubric, &id, &req))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(rec)))
}

#[derive(Debug, Deserialize)]
struct DisparityQuery {
    annotators: Option<String>,
}

/// Disparity over normalized composites. `overall` pools every (clip,
/// attribute) pair both annotators scored.
#[derive(Debug, Serialize, Deserialize)]
pub struct DisparityResponse {
    pub annotators: [String; 2],
    pub clips: usize,
    pub overall: Disparity,
    /// Absent for attributes with fewer than two paired scores.
    pub per_attribute: BTreeMap<Attribute, Option<Disparity>>,
}

async fn get_disparity(
    State(state): State<Arc<AppState>>,
    Query(q): Query<DisparityQuery>,
) -> ApiResult<Json<DisparityResponse>> {
    let names: Vec<&str> = q.annotators.as_deref().unwrap_or("").split(',').filter(|s| !s.is_empty()).collect();
    if names.len() != 2 || names[0] == names[1] {
        return Err(ApiError::bad_request("annotators must name two distinct annotators, e.g. GT1,GT2"));
    }
    let a = state.store.latest(names[0]);
    let b = state.store.latest(names[1]);
    let cap = state.rubric.bands.cap;
    let mut pooled = (Vec::new(), Vec::new());
    let mut per: BTreeMap<Attribute, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut clips = std::collections::BTreeSet::new();
    for (key, va) in &a {
        if let Some(vb) = b.get(key) {
            clips.insert(key.0.clone());
            pooled.0.push(va / cap);
            pooled.1.push(vb / cap);
            let e = per.entry(key.1).or_default();
            e.0.push(va / cap);
            e.1.push(vb / cap);
        }
    }
    let overall = interobserver_disparity(&pooled.0, &pooled.1).map_err(|_| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "insufficient_data",
            format!("{} and {} share {} scored pairs; need at least two", names[0], names[1], pooled.0.len()),
        )
    })?;
    let per_attribute = Attribute::ALL
        .into_iter()
        .map(|attr| {
            let d = per.get(&attr).and_then(|(x, y)| interobserver_disparity(x, y).ok());
            (attr, d)
        })
        .collect();
    Ok(Json(DisparityResponse {
        annotators: [names[0].to_string(), names[1].to_string()],
        clips: clips.len(),
        overall,
        per_attribute,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RubricCriterion {
    pub name: String,
    pub poor: f64,
    pub average: f64,
    pub optimum: f64,
    pub ceiling: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RubricAttribute {
    pub attribute: Attribute,
    pub label: String,
    pub criteria: Vec<RubricCriterion>,
}

/// Everything a client needs to compute composites exactly as the server
/// does.
#[derive(Debug, Serialize, Deserialize)]
pub struct RubricResponse {
    pub version: u32,
    pub bands: Bands,
    pub attributes: Vec<RubricAttribute>,
}

pub fn rubric_response(r: &Rubric) -> RubricResponse {
    RubricResponse {
        version: r.version,
        bands: r.bands,
        attributes: Attribute::ALL
            .into_iter()
            .map(|a| RubricAttribute {
                attribute: a,
                label: a.label().into(),
                criteria: r
                    .criteria(a)
                    .iter()
                    .map(|c| RubricCriterion {
                        name: c.name.clone(),
                        poor: c.poor,
                        average: c.average,
                        optimum: c.optimum,
                        ceiling: c.ceiling(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

async fn get_rubric(State(state): State<Arc<AppState>>) -> Json<RubricResponse> {
    Json(rubric_response(&state.rubric))
}
