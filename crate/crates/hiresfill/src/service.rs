//! HTTP facade for interactive use: upload an image, post hole masks, fetch
//! filled results.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hiresfill_core::coarse::CoarseBackend;
use hiresfill_core::refiner::refine;
use hiresfill_core::shift::DEFAULT_SHIFT_FRACTION;
use hiresfill_core::{coarse_fill, coarse_fill_with, CoarseConfig, Image, Mask, RefinerModel};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use crate::checkpoint::sha256_hex;
use crate::error::{io_err, Error, Result};
use crate::io::{decode_image, decode_mask, encode_png, peek_dimensions};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub max_pixels: usize,
    pub max_body_bytes: usize,
    pub session_ttl: Duration,
    pub coarse: CoarseConfig,
    /// Static files served at `/`.
    pub ui_dir: Option<PathBuf>,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_pixels: 32_000_000,
            max_body_bytes: 256 << 20,
            session_ttl: Duration::from_secs(30 * 60),
            coarse: CoarseConfig::default(),
            ui_dir: None,
            cors_origins: Vec::new(),
        }
    }
}

/// A model and the identifier reported by the health endpoint.
pub struct LoadedModel {
    pub model: RefinerModel<f32>,
    pub id: String,
}

struct SessionData {
    source: Arc<Image>,
    last_mask: Option<Mask>,
    last_result: Option<Bytes>,
    last_result_image: Option<Arc<Image>>,
}

struct Session {
    data: Mutex<SessionData>,
    expires: Mutex<Instant>,
    busy: AtomicBool,
}

pub struct AppState {
    config: ServiceConfig,
    model: RwLock<Option<Arc<LoadedModel>>>,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
    started: Instant,
}

impl AppState {
    pub fn new(config: ServiceConfig, model: Option<LoadedModel>) -> Arc<Self> {
        Arc::new(Self {
            config,
            model: RwLock::new(model.map(Arc::new)),
            sessions: Mutex::new(HashMap::new()),
            started: Instant::now(),
        })
    }

    /// Replaces the model; requests already running keep the old weights.
    pub fn swap_model(&self, model: LoadedModel) {
        *self.model.write().expect("model lock") = Some(Arc::new(model));
    }

    pub fn load_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        self.swap_model(load_model(path)?);
        Ok(())
    }

    fn current_model(&self) -> Option<Arc<LoadedModel>> {
        self.model.read().expect("model lock").clone()
    }

    fn session(&self, id: &str) -> Option<Arc<Session>> {
        let mut sessions = self.sessions.lock().expect("session lock");
        let now = Instant::now();
        let s = sessions.get(id)?.clone();
        let mut expires = s.expires.lock().expect("expiry lock");
        if *expires <= now {
            drop(expires);
            sessions.remove(id);
            return None;
        }
        *expires = now + self.config.session_ttl;
        drop(expires);
        Some(s)
    }

    fn insert_session(&self, source: Image) -> String {
        let mut raw = [0u8; 16];
        rand::rngs::OsRng.fill_bytes(&mut raw);
        let id = hex::encode(raw);
        let session = Session {
            data: Mutex::new(SessionData { source: Arc::new(source), last_mask: None, last_result: None, last_result_image: None }),
            expires: Mutex::new(Instant::now() + self.config.session_ttl),
            busy: AtomicBool::new(false),
        };
        self.sessions.lock().expect("session lock").insert(id.clone(), Arc::new(session));
        id
    }

    /// Drops expired sessions; returns how many remain.
    pub fn purge_expired(&self) -> usize {
        let now = Instant::now();
        let mut sessions = self.sessions.lock().expect("session lock");
        sessions.retain(|_, s| *s.expires.lock().expect("expiry lock") > now);
        sessions.len()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session lock").len()
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionInfo {
    pub session_id: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Health {
    pub status: String,
    pub checkpoint_id: Option<String>,
    pub uptime_s: f64,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintRequestOptions {
    pub coarse_backend: Option<CoarseBackend>,
    pub shift_fraction: Option<f64>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, msg)
}

/// Multipart parts keyed by field name.
async fn read_parts(mut multipart: Multipart) -> ApiResult<HashMap<String, Bytes>> {
    let mut parts = HashMap::new();
    loop {
        let field = match multipart.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return Err(ApiError::new(e.status(), e.body_text())),
        };
        let name = field.name().unwrap_or("").to_string();
        let data = field.bytes().await.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        parts.insert(name, data);
    }
    Ok(parts)
}

fn png_response(bytes: Bytes) -> Response {
    ([(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))], bytes).into_response()
}

fn check_pixels(state: &AppState, bytes: &[u8]) -> ApiResult<(usize, usize)> {
    let (w, h) = peek_dimensions(bytes).map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, e.to_string()))?;
    if w.saturating_mul(h) > state.config.max_pixels {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("{w}x{h} exceeds the {} pixel limit", state.config.max_pixels),
        ));
    }
    Ok((w, h))
}

async fn upload_image(State(state): State<Arc<AppState>>, multipart: Multipart) -> ApiResult<Json<SessionInfo>> {
    let parts = read_parts(multipart).await?;
    let bytes = parts.get("image").or_else(|| parts.values().next()).ok_or_else(|| bad_request("missing image part"))?.clone();
    check_pixels(&state, &bytes)?;
    let img = tokio::task::spawn_blocking(move || decode_image(&bytes))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, e.to_string()))?;
    let (height, width) = img.dims();
    let session_id = state.insert_session(img);
    Ok(Json(SessionInfo { session_id, width, height }))
}

/// Clears the busy flag when the request ends, however it ends.
struct BusyGuard(Arc<Session>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::Release);
    }
}

fn run_pipeline(model: &RefinerModel<f32>, source: &Image, mask: &Mask, coarse_cfg: &CoarseConfig, external: Option<&Image>, shift_fraction: f64) -> Result<Image> {
    if mask.is_all_valid() {
        return Ok(source.clone());
    }
    let coarse = match external {
        Some(pre) => coarse_fill_with(source, mask, coarse_cfg, pre)?,
        None => coarse_fill(source, mask, coarse_cfg)?,
    };
    Ok(refine(model, source, &coarse, shift_fraction)?)
}

async fn inpaint(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, multipart: Multipart) -> ApiResult<Response> {
    let session = state.session(&id).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown or expired session"))?;
    let model = state.current_model().ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"))?;
    if session.busy.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err() {
        return Err(ApiError::new(StatusCode::CONFLICT, "an inpaint request for this session is already running"));
    }
    let guard = BusyGuard(session.clone());
    let parts = read_parts(multipart).await?;
    let options: InpaintRequestOptions = match parts.get("options") {
        Some(b) => serde_json::from_slice(b).map_err(|e| bad_request(format!("options: {e}")))?,
        None => InpaintRequestOptions::default(),
    };
    let shift_fraction = options.shift_fraction.unwrap_or(DEFAULT_SHIFT_FRACTION);
    if !(shift_fraction > 0.0 && shift_fraction < 1.0) {
        return Err(bad_request("shift_fraction must lie in (0, 1)"));
    }
    let mut coarse_cfg = state.config.coarse.clone();
    if let Some(b) = options.coarse_backend {
        coarse_cfg.backend = b;
    }
    let mask_bytes = parts.get("mask").ok_or_else(|| bad_request("missing mask part"))?.clone();
    check_pixels(&state, &mask_bytes)?;
    let external_bytes = match coarse_cfg.backend {
        CoarseBackend::ExternalFile => Some(parts.get("coarse").ok_or_else(|| bad_request("external backend needs a coarse part"))?.clone()),
        CoarseBackend::BuiltinPyramid => None,
    };
    let source = session.data.lock().expect("session data").source.clone();
    let result = tokio::task::spawn_blocking(move || -> ApiResult<(Mask, Image, Vec<u8>)> {
        let mask = decode_mask(&mask_bytes).map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, format!("mask: {e}")))?;
        if mask.dims() != source.dims() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("mask is {}x{}, image is {}x{}", mask.width(), mask.height(), source.width(), source.height()),
            ));
        }
        let external = match external_bytes {
            Some(b) => Some(decode_image(&b).map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, format!("coarse: {e}")))?),
            None => None,
        };
        let out = run_pipeline(&model.model, &source, &mask, &coarse_cfg, external.as_ref(), shift_fraction).map_err(|e| match e {
            Error::Core(hiresfill_core::Error::Backend(m)) => ApiError::new(StatusCode::CONFLICT, m),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        })?;
        let png = encode_png(&out).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        Ok((mask, out, png))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let (mask, out, png) = result;
    let png = Bytes::from(png);
    {
        let mut data = session.data.lock().expect("session data");
        data.last_mask = Some(mask);
        data.last_result = Some(png.clone());
        data.last_result_image = Some(Arc::new(out));
    }
    drop(guard);
    Ok(png_response(png))
}

async fn last_result(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let session = state.session(&id).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown or expired session"))?;
    let png = session.data.lock().expect("session data").last_result.clone();
    png.map(png_response).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no result yet"))
}

/// Makes the last result the session's source so editing can continue on it.
async fn promote(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionInfo>> {
    let session = state.session(&id).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown or expired session"))?;
    if session.busy.load(Ordering::Acquire) {
        return Err(ApiError::new(StatusCode::CONFLICT, "an inpaint request for this session is running"));
    }
    let mut data = session.data.lock().expect("session data");
    let result = data.last_result_image.take().ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no result to promote"))?;
    let (height, width) = result.dims();
    data.source = result;
    data.last_mask = None;
    data.last_result = None;
    Ok(Json(SessionInfo { session_id: id, width, height }))
}

async fn source_image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let session = state.session(&id).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown or expired session"))?;
    let source = session.data.lock().expect("session data").source.clone();
    let png = tokio::task::spawn_blocking(move || encode_png(&source))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(png_response(Bytes::from(png)))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let model = state.current_model();
    Json(Health {
        status: if model.is_some() { "ok" } else { "degraded" }.to_string(),
        checkpoint_id: model.map(|m| m.id.clone()),
        uptime_s: state.started.elapsed().as_secs_f64(),
    })
}

fn cors(origins: &[String]) -> Result<CorsLayer> {
    let layer = CorsLayer::new().allow_methods(tower_http::cors::Any).allow_headers(tower_http::cors::Any);
    if origins.is_empty() {
        return Ok(layer.allow_origin(tower_http::cors::Any));
    }
    let values = origins
        .iter()
        .map(|o| HeaderValue::from_str(o).map_err(|_| Error::Config(format!("invalid CORS origin {o:?}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(layer.allow_origin(AllowOrigin::list(values)))
}

pub fn router(state: Arc<AppState>) -> Result<Router> {
    let api = Router::new()
        .route("/api/v1/images", post(upload_image))
        .route("/api/v1/sessions/{id}/inpaint", post(inpaint))
        .route("/api/v1/sessions/{id}/result", get(last_result))
        .route("/api/v1/sessions/{id}/source", get(source_image))
        .route("/api/v1/sessions/{id}/promote", post(promote))
        .route("/api/v1/health", get(health))
        .layer(DefaultBodyLimit::max(state.config.max_body_bytes))
        .layer(cors(&state.config.cors_origins)?);
    let app = match &state.config.ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    Ok(app.with_state(state))
}

/// Binds, serves until ctrl-c, and purges expired sessions once a minute.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> Result<()> {
    let app = router(state.clone())?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::Io { path: PathBuf::from(addr.to_string()), source: e })?;
    let purger = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            purger.purge_expired();
        }
    });
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::Io { path: PathBuf::from(addr.to_string()), source: e })
}

/// Loads a checkpoint for serving, identified by the hash of its bytes.
pub fn load_model(path: &std::path::Path) -> Result<LoadedModel> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(LoadedModel { model: crate::checkpoint::decode_refiner(&bytes)?.model, id: sha256_hex(&bytes) })
}

