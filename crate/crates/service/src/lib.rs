//! HTTP inference service.
//!
//! * `POST /api/enhance`: multipart form with an `image` PNG and optional `omega`, `gamma`
//!   and `reference` (PNG) fields. Replies with the enhanced PNG; the applied settings are in
//!   the `x-enhance-metadata` header as JSON.
//! * `GET /api/health`: `{status, model_id, gamut_hash}`, 503 until a model is loaded.
//!
//! Models are swapped atomically: requests already running keep the model they started with.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bcnet::checkpoint::{model_id, Checkpoint};
use bcnet::customize::{CustomizeParams, DEFAULT_GAMMA};
use bcnet::image_io::{decode_png, encode_png, png_dimensions, BitDepth};
use bcnet::quantizer::ColorGamut;
use bcnet::{Image, Model};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const METADATA_HEADER: &str = "x-enhance-metadata";
pub const DEFAULT_MAX_SIDE: u32 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    /// Largest accepted width or height.
    pub max_side: u32,
    pub max_body_bytes: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_side: DEFAULT_MAX_SIDE, max_body_bytes: 128 << 20 }
    }
}

/// A read-only model with its identity.
pub struct LoadedModel {
    pub model: Model,
    pub model_id: String,
    pub gamut_hash: String,
}

struct Shared {
    slot: RwLock<Option<Arc<LoadedModel>>>,
    gamut: ColorGamut,
    limits: Limits,
}

#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    pub fn new(gamut: ColorGamut, limits: Limits) -> Self {
        AppState { shared: Arc::new(Shared { slot: RwLock::new(None), gamut, limits }) }
    }

    /// Parses and installs a checkpoint. On any error the current model stays in place.
    pub fn load_bytes(&self, bytes: &[u8]) -> bcnet::Result<String> {
        let ck = Checkpoint::<f32>::from_bytes(bytes, &self.shared.gamut)?;
        let loaded = Arc::new(LoadedModel { model: ck.model, model_id: model_id(bytes), gamut_hash: ck.gamut_sha256 });
        let id = loaded.model_id.clone();
        *self.shared.slot.write().unwrap_or_else(|e| e.into_inner()) = Some(loaded);
        log::info!("installed model {id}");
        Ok(id)
    }

    pub fn load_model(&self, path: &Path) -> bcnet::Result<String> {
        let bytes = std::fs::read(path)?;
        self.load_bytes(&bytes).inspect_err(|e| log::warn!("refused checkpoint {}: {e}", path.display()))
    }

    pub fn current(&self) -> Option<Arc<LoadedModel>> {
        self.shared.slot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn gamut(&self) -> &ColorGamut {
        &self.shared.gamut
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_id: Option<String>,
    pub gamut_hash: Option<String>,
}

/// Settings applied to one request, returned alongside the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhanceMetadata {
    pub omega: f64,
    pub gamma: f64,
    pub reference: bool,
    pub model_id: String,
    pub width: u32,
    pub height: u32,
    pub latency_ms: f64,
    /// SHA-256 of the predicted lightness plane (f32 little-endian), for invariance checks.
    pub lightness_sha256: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        log::info!("request failed: {} {}", self.status.as_u16(), self.message);
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

async fn health(State(state): State<AppState>) -> Response {
    match state.current() {
        Some(m) => Json(Health {
            status: "ok".into(),
            model_id: Some(m.model_id.clone()),
            gamut_hash: Some(m.gamut_hash.clone()),
        })
        .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health { status: "no model loaded".into(), model_id: None, gamut_hash: None }),
        )
            .into_response(),
    }
}

#[derive(Default)]
struct Form {
    image: Option<Vec<u8>>,
    reference: Option<Vec<u8>>,
    omega: Option<f64>,
    gamma: Option<f64>,
}

fn parse_number(name: &str, text: &str) -> Result<f64, ApiError> {
    let v: f64 = text.trim().parse().map_err(|_| ApiError::bad(format!("{name} is not a number: {text:?}")))?;
    if !v.is_finite() {
        return Err(ApiError::bad(format!("{name} must be finite")));
    }
    Ok(v)
}

async fn read_form(mut multipart: Multipart) -> Result<Form, ApiError> {
    let mut form = Form::default();
    let field_error = |e: axum::extract::multipart::MultipartError| ApiError::new(e.status(), e.body_text());
    while let Some(field) = multipart.next_field().await.map_err(field_error)? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "image" => form.image = Some(field.bytes().await.map_err(field_error)?.to_vec()),
            "reference" => form.reference = Some(field.bytes().await.map_err(field_error)?.to_vec()),
            "omega" => form.omega = Some(parse_number("omega", &field.text().await.map_err(field_error)?)?),
            "gamma" => form.gamma = Some(parse_number("gamma", &field.text().await.map_err(field_error)?)?),
            other => return Err(ApiError::bad(format!("unexpected field {other:?}"))),
        }
    }
    Ok(form)
}

fn checked_dims(bytes: &[u8], what: &str, limits: Limits) -> Result<(u32, u32), ApiError> {
    let (w, h) = png_dimensions(bytes).map_err(|e| ApiError::bad(format!("{what} is not a PNG: {e}")))?;
    if w == 0 || h == 0 {
        return Err(ApiError::bad(format!("{what} is empty")));
    }
    if w > limits.max_side || h > limits.max_side {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("{what} is {w}x{h}, limit is {0}x{0}", limits.max_side),
        ));
    }
    Ok((w, h))
}

struct Enhanced {
    png: Vec<u8>,
    lightness_sha256: String,
}

fn run(model: &Model, image: &[u8], params: CustomizeParams<f32>) -> Result<Enhanced, ApiError> {
    let img: Image = decode_png(image).map_err(|e| ApiError::bad(format!("image: {e}")))?;
    let out = model.enhance(&img, &params).map_err(|e| ApiError::bad(e.to_string()))?;
    let png = encode_png(&out.rgb, BitDepth::Eight)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let bytes: Vec<u8> = out.lightness.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    Ok(Enhanced { png, lightness_sha256: hex::encode(Sha256::digest(&bytes)) })
}

async fn enhance(State(state): State<AppState>, multipart: Multipart) -> Result<Response, ApiError> {
    let start = Instant::now();
    let form = read_form(multipart).await?;
    let model = state
        .current()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"))?;
    let limits = state.shared.limits;
    let image = form.image.ok_or_else(|| ApiError::bad("missing image field"))?;
    let (width, height) = checked_dims(&image, "image", limits)?;
    let omega = form.omega.unwrap_or(0.0);
    let gamma = form.gamma.unwrap_or(if form.reference.is_some() { DEFAULT_GAMMA } else { 0.0 });
    if !(0.0..=1.0).contains(&gamma) {
        return Err(ApiError::bad(format!("gamma {gamma} outside [0, 1]")));
    }
    let reference = match form.reference {
        Some(bytes) => {
            checked_dims(&bytes, "reference", limits)?;
            Some(decode_png::<f32>(&bytes).map_err(|e| ApiError::bad(format!("reference: {e}")))?)
        }
        None if gamma > 0.0 => {
            return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "gamma > 0 requires a reference image"));
        }
        None => None,
    };
    let has_reference = reference.is_some();
    let params = CustomizeParams { omega, gamma, reference, ..Default::default() };
    let worker = model.clone();
    let out = tokio::task::spawn_blocking(move || run(&worker.model, &image, params))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let meta = EnhanceMetadata {
        omega,
        gamma,
        reference: has_reference,
        model_id: model.model_id.clone(),
        width,
        height,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        lightness_sha256: out.lightness_sha256,
    };
    log::info!(
        "enhance {width}x{height} omega={omega} gamma={gamma} model={} latency_ms={:.1}",
        meta.model_id,
        meta.latency_ms
    );
    let json = serde_json::to_string(&meta).expect("metadata serializes");
    let mut resp = out.png.into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    headers.insert(METADATA_HEADER, HeaderValue::from_str(&json).expect("JSON is a valid header value"));
    Ok(resp)
}

async fn allow_browser(mut resp: Response) -> Response {
    let headers = resp.headers_mut();
    headers.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    headers.insert(header::ACCESS_CONTROL_EXPOSE_HEADERS, HeaderValue::from_static(METADATA_HEADER));
    resp
}

pub fn router(state: AppState) -> Router {
    let limit = state.shared.limits.max_body_bytes;
    Router::new()
        .route("/api/health", get(health))
        .route("/api/enhance", post(enhance))
        .layer(DefaultBodyLimit::max(limit))
        .layer(axum::middleware::map_response(allow_browser))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
