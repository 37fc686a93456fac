//! HTTP service for interactive segmentation.

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;

use pdas_core::dataset::{
    image_from_png_bytes, image_to_png_bytes, read_manifest, Dataset, MANIFEST,
};
use pdas_core::infer::{interactive_predict, Segmentation};
use pdas_core::metrics::Rle;
use pdas_core::model::ModelState;
use pdas_core::{Error, Grid, Point};

pub const MAX_IMAGE_SIDE: usize = 1024;
const MAX_BODY_BYTES: usize = 32 << 20;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub port: u16,
    pub checkpoint: PathBuf,
    pub dataset_root: Option<PathBuf>,
    pub max_concurrent: usize,
    pub max_image_side: usize,
}

#[derive(Clone)]
pub struct AppState {
    model: Arc<OnceLock<ModelState>>,
    dataset_root: Option<PathBuf>,
    permits: Arc<Semaphore>,
    max_image_side: usize,
}

impl AppState {
    /// A state whose model is still loading.
    pub fn loading(config: &ServiceConfig) -> Self {
        Self {
            model: Arc::new(OnceLock::new()),
            dataset_root: config.dataset_root.clone(),
            permits: Arc::new(Semaphore::new(config.max_concurrent.max(1))),
            max_image_side: config.max_image_side,
        }
    }

    pub fn with_model(config: &ServiceConfig, model: ModelState) -> Self {
        let s = Self::loading(config);
        s.set_model(model);
        s
    }

    pub fn set_model(&self, model: ModelState) {
        let _ = self.model.set(model);
    }

    pub fn is_ready(&self) -> bool {
        self.model.get().is_some()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFormat {
    #[default]
    Rle,
    Png,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestPoint {
    pub row: i64,
    pub col: i64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    /// Base64 8-bit grayscale PNG.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default)]
    pub points: Vec<RequestPoint>,
    #[serde(default, rename = "return")]
    pub format: MaskFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskPayload {
    Rle(Rle),
    Png(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask: MaskPayload,
    pub instances: usize,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub has_labels: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageList {
    pub images: Vec<ImageEntry>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/images", get(list_images))
        .route("/v1/segment", post(segment))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let status = if state.is_ready() { "ok" } else { "loading" };
    Json(serde_json::json!({ "status": status }))
}

pub fn list_dataset(root: Option<&Path>) -> Result<ImageList, ApiError> {
    let Some(root) = root else {
        return Ok(ImageList { images: Vec::new() });
    };
    if !root.is_dir() {
        return Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("dataset root {} does not exist", root.display()),
        ));
    }
    if !root.join(MANIFEST).is_file() {
        return Ok(ImageList { images: Vec::new() });
    }
    let internal = |e: Error| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    let manifest = read_manifest(root).map_err(internal)?;
    let ds = Dataset {
        root: root.to_path_buf(),
        manifest,
    };
    let images = ds
        .manifest
        .samples
        .iter()
        .map(|e| ImageEntry {
            id: e.id.clone(),
            height: e.height,
            width: e.width,
            has_labels: ds.has_labels(&e.id),
        })
        .collect();
    Ok(ImageList { images })
}

async fn list_images(State(state): State<AppState>) -> Result<Json<ImageList>, ApiError> {
    list_dataset(state.dataset_root.as_deref()).map(Json)
}

fn resolve_image(state: &AppState, req: &SegmentRequest) -> Result<Grid<f64>, ApiError> {
    let png = match (&req.image, &req.image_id) {
        (Some(_), Some(_)) => {
            return Err(ApiError::bad_request(
                "give either image or image_id, not both",
            ))
        }
        (None, None) => return Err(ApiError::bad_request("missing image or image_id")),
        (Some(b64), None) => BASE64
            .decode(b64.trim())
            .map_err(|e| ApiError::bad_request(format!("image is not valid base64: {e}")))?,
        (None, Some(id)) => {
            let root = state
                .dataset_root
                .as_deref()
                .ok_or_else(|| ApiError::bad_request("no dataset root configured"))?;
            let ds = Dataset::open(root)
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            ds.image_png(id).map_err(|_| {
                ApiError::new(StatusCode::NOT_FOUND, format!("unknown image_id {id:?}"))
            })?
        }
    };
    let image = image_from_png_bytes(&png)
        .map_err(|e| ApiError::bad_request(format!("image is not a decodable PNG: {e}")))?;
    let (h, w) = image.dims();
    if w > state.max_image_side || h > state.max_image_side {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image {h}x{w} exceeds {0}x{0}", state.max_image_side),
        ));
    }
    Ok(image)
}

fn validate_points(
    points: &[RequestPoint],
    (h, w): (usize, usize),
) -> Result<Vec<Point>, ApiError> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.row < 0 || p.col < 0 || p.row as u64 >= h as u64 || p.col as u64 >= w as u64 {
                Err(ApiError::bad_request(format!("point {i} out of bounds")))
            } else {
                Ok(Point::new(p.row as usize, p.col as usize))
            }
        })
        .collect()
}

pub fn encode_mask(seg: &Segmentation, format: MaskFormat) -> Result<MaskPayload, Error> {
    Ok(match format {
        MaskFormat::Rle => MaskPayload::Rle(Rle::encode(&seg.mask)),
        MaskFormat::Png => {
            let (h, w) = seg.mask.dims();
            let g = Grid::from_vec(
                h,
                w,
                seg.mask
                    .data()
                    .iter()
                    .map(|&v| if v { 1.0 } else { 0.0 })
                    .collect(),
            )?;
            MaskPayload::Png(BASE64.encode(image_to_png_bytes(&g)?))
        }
    })
}

async fn segment(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<SegmentResponse>, ApiError> {
    let start = Instant::now();
    let req: SegmentRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))?;
    if !state.is_ready() {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "model is loading",
        ));
    }
    let image = resolve_image(&state, &req)?;
    let points = validate_points(&req.points, image.dims())?;
    let n_points = points.len();
    let _permit = state
        .permits
        .clone()
        .acquire_owned()
        .await
        .expect("semaphore is never closed");
    let worker = state.clone();
    let seg = tokio::task::spawn_blocking(move || {
        let model = worker.model.get().expect("checked ready");
        interactive_predict(model, &image, &points)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(|e| match e {
        Error::OutOfBounds { .. } | Error::InvalidArgument(_) => {
            ApiError::bad_request(e.to_string())
        }
        e => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    })?;
    let mask = encode_mask(&seg, req.format)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    log::info!(
        "segment: {n_points} points, {} instances, {latency_ms:.1} ms",
        seg.num_instances
    );
    Ok(Json(SegmentResponse {
        mask,
        instances: seg.num_instances,
        latency_ms,
    }))
}

/// Binds the port, loads the checkpoint in the background (answering 503
/// meanwhile) and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let state = AppState::loading(&config);
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", config.port))
        .await
        .with_context(|| format!("binding port {}", config.port))?;
    log::info!("listening on {}", listener.local_addr()?);
    let ckpt = config.checkpoint.clone();
    let load = tokio::task::spawn_blocking(move || ModelState::load(&ckpt));
    let app = router(state.clone());
    let server = tokio::spawn(async move { axum::serve(listener, app).await });
    let model = load
        .await?
        .with_context(|| format!("loading checkpoint {}", config.checkpoint.display()))?;
    log::info!(
        "loaded {} ({} parameters, step {})",
        config.checkpoint.display(),
        model.num_parameters(),
        model.step
    );
    state.set_model(model);
    server.await??;
    Ok(())
}
