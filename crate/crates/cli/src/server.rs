//! HTTP API over one loaded checkpoint and scene.

use std::collections::VecDeque;
use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use axum::body::{Body, Bytes};
use axum::extract::{Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use objscale_core::scalenet::scan_valid_region;
use objscale_core::scenegen::load_bundle;
use objscale_core::{Checkpoint, Pose, ScaleBounds, SceneBundle};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{free_scales, quantize_scales, render_png, CliError, MAX_RENDER_SIDE};

const CACHE_ENTRIES: usize = 64;
const LOG_ENTRIES: usize = 256;
const MAX_SLICE_RES: usize = 201;

/// A checkpoint with its scene, in checkpoint object order.
pub struct Loaded {
    pub ckpt: Checkpoint,
    pub bundle: SceneBundle,
}

impl Loaded {
    pub fn open(ckpt: &std::path::Path, scene: &std::path::Path) -> objscale_core::Result<Self> {
        let ckpt = Checkpoint::load(ckpt)?;
        let bundle = ckpt.ordered_bundle(&load_bundle(scene)?)?;
        Ok(Self { ckpt, bundle })
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct RenderKey {
    scales: Vec<i64>,
    frame: usize,
    pose: Option<Vec<u64>>,
    width: usize,
    height: usize,
}

/// Shared service state. Until `loaded` is set every endpoint answers 503.
#[derive(Clone)]
pub struct AppState {
    loaded: Arc<OnceLock<Loaded>>,
    cache: Arc<Mutex<LruCache<RenderKey, Bytes>>>,
    log: Arc<Mutex<VecDeque<String>>>,
}

impl Default for AppState {
    fn default() -> Self {
        Self {
            loaded: Arc::new(OnceLock::new()),
            cache: Arc::new(Mutex::new(LruCache::new(NonZeroUsize::new(CACHE_ENTRIES).expect("non-zero")))),
            log: Arc::new(Mutex::new(VecDeque::with_capacity(LOG_ENTRIES))),
        }
    }
}

impl AppState {
    pub fn ready(loaded: Loaded) -> Self {
        let s = Self::default();
        s.set_loaded(loaded);
        s
    }

    pub fn set_loaded(&self, loaded: Loaded) {
        let _ = self.loaded.set(loaded);
    }

    /// Most recent request lines, oldest first.
    pub fn log(&self) -> Vec<String> {
        self.log.lock().expect("log lock").iter().cloned().collect()
    }

    pub fn cached_renders(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

fn loaded(state: &AppState) -> Result<&Loaded, ApiError> {
    state
        .loaded
        .get()
        .ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, "model is loading".into()))
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| bad(format!("malformed body: {e}")))
}

fn checked_free(scales: &[f64], k: usize) -> Result<Vec<f64>, ApiError> {
    let free = free_scales(scales, k).map_err(bad)?;
    if free.iter().any(|s| !(0.0..1.0).contains(s)) {
        return Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, "scales must lie in [0, 1)".into()));
    }
    Ok(free)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/scene", get(scene))
        .route("/api/validity", post(validity))
        .route("/api/render", post(render))
        .route("/api/valid-slice", get(valid_slice))
        .layer(middleware::from_fn_with_state(state.clone(), log_requests))
        .with_state(state)
}

async fn log_requests(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let line = format!("{} {}", req.method(), req.uri());
    let resp = next.run(req).await;
    let mut log = state.log.lock().expect("log lock");
    if log.len() == LOG_ENTRIES {
        log.pop_front();
    }
    log.push_back(format!("{line} {}", resp.status().as_u16()));
    resp
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct SceneSummary {
    pub num_objects: usize,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub bounds: ScaleBounds,
    /// Scene object index of each model object; entry 0 is the anchor.
    pub order: Vec<usize>,
}

async fn scene(State(state): State<AppState>) -> Result<Json<SceneSummary>, ApiError> {
    let l = loaded(&state)?;
    Ok(Json(SceneSummary {
        num_objects: l.ckpt.num_objects(),
        num_frames: l.bundle.num_frames(),
        width: l.bundle.manifest.width,
        height: l.bundle.manifest.height,
        bounds: l.ckpt.bounds.clone(),
        order: l.ckpt.order.clone(),
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ValidityRequest {
    scales: Vec<f64>,
}

async fn validity(State(state): State<AppState>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let l = loaded(&state)?;
    let req: ValidityRequest = parse(&body)?;
    let free = checked_free(&req.scales, l.ckpt.num_objects())?;
    let score = l.ckpt.scalenet.predict_free(&free).map_err(|e| bad(e.to_string()))?;
    Ok(Json(json!({ "score": score })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RenderRequest {
    scales: Vec<f64>,
    frame: Option<usize>,
    /// Camera-to-anchor pose as a row-major 3x4 `[R | t]`.
    pose: Option<Vec<f64>>,
    width: Option<usize>,
    height: Option<usize>,
}

fn pose_from_rows(v: &[f64]) -> Result<Pose, ApiError> {
    if v.len() != 12 {
        return Err(bad(format!("pose needs 12 values, got {}", v.len())));
    }
    let rot = objscale_core::geometry::Matrix3::from_fn(|r, c| v[r * 4 + c]);
    let t = objscale_core::Vec3::new(v[3], v[7], v[11]);
    Pose::new(rot, t).map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
}

async fn render(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let l = loaded(&state)?;
    let req: RenderRequest = parse(&body)?;
    let free = checked_free(&req.scales, l.ckpt.num_objects())?;
    let width = req.width.unwrap_or(l.bundle.manifest.width);
    let height = req.height.unwrap_or(l.bundle.manifest.height);
    if width > MAX_RENDER_SIDE || height > MAX_RENDER_SIDE {
        return Err(ApiError(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("images are limited to {MAX_RENDER_SIDE}x{MAX_RENDER_SIDE}"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(bad("image size must be positive"));
    }
    let frame = req.frame.unwrap_or(0);
    if frame >= l.bundle.num_frames() {
        return Err(bad(format!("frame {frame} outside 0..{}", l.bundle.num_frames())));
    }
    let camera = req.pose.as_deref().map(pose_from_rows).transpose()?;
    let key = RenderKey {
        scales: quantize_scales(&free).iter().map(|s| (s * 1e4).round() as i64).collect(),
        frame,
        pose: req.pose.as_ref().map(|p| p.iter().map(|v| v.to_bits()).collect()),
        width,
        height,
    };
    let cached = state.cache.lock().expect("cache lock").get(&key).cloned();
    let png = match cached {
        Some(b) => b,
        None => {
            let bytes = tokio::task::block_in_place(|| {
                render_png(&l.ckpt, &l.bundle, &free, frame, camera.as_ref(), width, height)
            })
            .map_err(internal)?;
            let b = Bytes::from(bytes);
            state.cache.lock().expect("cache lock").put(key, b.clone());
            b
        }
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], Body::from(png)).into_response())
}

#[derive(Deserialize)]
struct SliceQuery {
    axis_i: usize,
    axis_j: Option<usize>,
    res: usize,
    /// Comma-separated values of all free scales.
    fixed: Option<String>,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct SliceResponse {
    pub axes: Vec<usize>,
    pub res: usize,
    pub coords: Vec<f64>,
    pub fixed: Vec<f64>,
    /// Row-major, first axis slowest.
    pub scores: Vec<f64>,
}

async fn valid_slice(
    State(state): State<AppState>,
    query: Result<Query<SliceQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<SliceResponse>, ApiError> {
    let l = loaded(&state)?;
    let Query(q) = query.map_err(|e| bad(e.to_string()))?;
    let k = l.ckpt.num_objects();
    if q.res < 2 || q.res > MAX_SLICE_RES {
        return Err(bad(format!("res must lie in 2..={MAX_SLICE_RES}")));
    }
    let fixed: Vec<f64> = match q.fixed.as_deref().filter(|s| !s.is_empty()) {
        Some(s) => s
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| bad(format!("fixed: {e}"))))
            .collect::<Result<_, _>>()?,
        None => vec![0.5; k - 1],
    };
    let fixed = checked_free(&fixed, k)?;
    let mut axes = vec![q.axis_i];
    axes.extend(q.axis_j);
    let grid = scan_valid_region(&l.ckpt.scalenet, q.res, &axes, &fixed).map_err(|e| bad(e.to_string()))?;
    Ok(Json(SliceResponse {
        coords: (0..q.res).map(|i| grid.coord(i)).collect(),
        axes: grid.axes,
        res: grid.resolution,
        fixed: grid.fixed,
        scores: grid.scores,
    }))
}

/// Binds `port`, answers 503 while the model loads, then serves until killed.
pub async fn serve(ckpt: PathBuf, scene: PathBuf, port: u16) -> Result<(), CliError> {
    let state = AppState::default();
    let app = router(state.clone());
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
        .await
        .map_err(|e| CliError::User(format!("cannot bind port {port}: {e}")))?;
    log::info!("listening on http://127.0.0.1:{port}");
    let loader = tokio::task::spawn_blocking(move || Loaded::open(&ckpt, &scene));
    let server = tokio::spawn(async move { axum::serve(listener, app).await });
    let l = loader
        .await
        .map_err(|e| CliError::Internal(e.to_string()))?
        .map_err(CliError::from)?;
    state.set_loaded(l);
    log::info!("model loaded");
    server
        .await
        .map_err(|e| CliError::Internal(e.to_string()))?
        .map_err(|e| CliError::Internal(e.to_string()))
}
