//! HTTP screening service: accepts an X-ray upload (PNG, JPEG, or
//! DICOM-lite, raw body or multipart), runs the active model, and returns
//! the verdict.
//!
//! Endpoints:
//! - `GET  /health` — `{status: ok|degraded, model_id}`
//! - `GET  /model` — the active registry entry
//! - `POST /screen` — image body or multipart; returns a [`ScreeningResult`]
//! - `POST /model/reload` — optional `{weights, variant}` JSON; atomic swap
//!
//! The model snapshot is immutable and shared read-only; each request is
//! served entirely by the snapshot it grabbed at entry. Screenings append to
//! a JSON-lines audit log through a single writer thread fed by a queue; if
//! the log becomes unwritable the service keeps serving and reports itself
//! degraded. An optional webhook receives each result, fire-and-forget with
//! three attempts.

mod audit;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{
    assemble_model, ArchitectureGraph, ModelVariant, ParameterStore,
};
use crate::data::image::{decode_image_bytes, preprocess, PreprocessOptions};
use crate::data::Label;
use crate::error::{Error, Result};
use crate::train::predict_one;

pub use audit::{record_result, AuditLog};

pub const DEFAULT_BODY_LIMIT: usize = 32 * 1024 * 1024;

/// Startup configuration for [`ScreeningService`].
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Bind address, e.g. `127.0.0.1:8080`. Port 0 picks an ephemeral port.
    pub addr: SocketAddr,
    pub weights_path: PathBuf,
    pub variant: ModelVariant,
    /// JSON-lines audit log; `None` disables auditing.
    pub audit_log: Option<PathBuf>,
    /// Outbound webhook receiving each result as JSON.
    pub webhook: Option<String>,
    /// Request body cap in bytes.
    pub body_limit: usize,
}

impl ServiceConfig {
    pub fn new(addr: SocketAddr, weights_path: impl Into<PathBuf>, variant: ModelVariant) -> Self {
        ServiceConfig {
            addr,
            weights_path: weights_path.into(),
            variant,
            audit_log: None,
            webhook: None,
            body_limit: DEFAULT_BODY_LIMIT,
        }
    }
}

/// Identity of a loaded weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistryEntry {
    pub model_id: String,
    pub variant: String,
    pub weights_path: PathBuf,
    /// `sha256:<hex>` of the container bytes at load time.
    pub digest: String,
    pub loaded_at: String,
}

/// One screening verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningResult {
    pub request_id: String,
    pub label: Label,
    /// `[p_covid, p_normal]`; sums to 1 and `label` is its argmax.
    pub probabilities: [f64; 2],
    pub model_id: String,
    pub processing_ms: f64,
    pub timestamp: String,
}

/// An immutable loaded model; requests clone the `Arc` and never observe a
/// half-swapped state.
pub struct ActiveModel {
    pub entry: ModelRegistryEntry,
    pub graph: ArchitectureGraph,
    pub store: ParameterStore,
}

/// Reads and verifies a weights file against the variant's graph.
pub fn load_model(weights_path: &Path, variant: ModelVariant) -> Result<ActiveModel> {
    let graph = assemble_model(variant);
    let bytes = std::fs::read(weights_path).map_err(|e| Error::file(weights_path, e))?;
    let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let digest = format!("sha256:{hex}");
    let store = crate::arch::deserialize_weights(&bytes, &graph)?;
    let entry = ModelRegistryEntry {
        model_id: format!("{variant}@{}", &digest[7..19]),
        variant: variant.to_string(),
        weights_path: weights_path.to_path_buf(),
        digest,
        loaded_at: chrono::Utc::now().to_rfc3339(),
    };
    Ok(ActiveModel { entry, graph, store })
}

struct AppState {
    model: RwLock<Arc<ActiveModel>>,
    audit: Option<AuditLog>,
    degraded: Arc<AtomicBool>,
    webhook: Option<String>,
    http: reqwest::Client,
}

type SharedState = Arc<AppState>;

/// A running HTTP service; dropping it aborts the server task.
pub struct ScreeningService {
    pub addr: SocketAddr,
    shutdown: tokio::sync::watch::Sender<bool>,
    task: tokio::task::JoinHandle<()>,
}

impl ScreeningService {
    /// Loads the model (refusing to start on bad weights), binds, and serves.
    pub async fn start(config: ServiceConfig) -> Result<ScreeningService> {
        let model = load_model(&config.weights_path, config.variant)?;
        let degraded = Arc::new(AtomicBool::new(false));
        let audit = config
            .audit_log
            .as_ref()
            .map(|path| AuditLog::spawn(path.clone(), Arc::clone(&degraded)));
        let state: SharedState = Arc::new(AppState {
            model: RwLock::new(Arc::new(model)),
            audit,
            degraded,
            webhook: config.webhook.clone(),
            http: reqwest::Client::new(),
        });

        let app = Router::new()
            .route("/health", get(health))
            .route("/model", get(model_info))
            .route("/model/reload", post(model_reload))
            .route("/screen", post(screen))
            .layer(DefaultBodyLimit::max(config.body_limit))
            .with_state(state);

        let listener = tokio::net::TcpListener::bind(config.addr)
            .await
            .map_err(Error::Io)?;
        let addr = listener.local_addr().map_err(Error::Io)?;
        let (shutdown, mut rx) = tokio::sync::watch::channel(false);
        let task = tokio::spawn(async move {
            let serve = axum::serve(listener, app).with_graceful_shutdown(async move {
                let _ = rx.wait_for(|stop| *stop).await;
            });
            if let Err(err) = serve.await {
                eprintln!("screening service stopped: {err}");
            }
        });
        Ok(ScreeningService { addr, shutdown, task })
    }

    /// Graceful shutdown; waits for in-flight requests.
    pub async fn stop(self) {
        let _ = self.shutdown.send(true);
        let _ = self.task.await;
    }
}

/// Builds a runtime and serves until interrupted. The CLI entry point.
pub fn run_blocking(config: ServiceConfig) -> Result<()> {
    let runtime = tokio::runtime::Runtime::new().map_err(Error::Io)?;
    runtime.block_on(async {
        let service = ScreeningService::start(config).await?;
        eprintln!("screening service listening on http://{}", service.addr);
        tokio::signal::ctrl_c().await.map_err(Error::Io)?;
        service.stop().await;
        Ok(())
    })
}

/// Machine-readable error body.
#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

enum ApiError {
    BadRequest(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(ErrorBody { error: message })).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(err: Error) -> Self {
        match err {
            Error::Argument(_) | Error::Dimension(_) | Error::Format(_) | Error::Unsupported(_) => {
                ApiError::BadRequest(err.to_string())
            }
            other => ApiError::Internal(other.to_string()),
        }
    }
}

async fn health(State(state): State<SharedState>) -> Json<serde_json::Value> {
    let model_id = state.model.read().expect("model lock").entry.model_id.clone();
    let status = if state.degraded.load(Ordering::Relaxed) { "degraded" } else { "ok" };
    Json(serde_json::json!({ "status": status, "model_id": model_id }))
}

async fn model_info(State(state): State<SharedState>) -> Json<ModelRegistryEntry> {
    Json(state.model.read().expect("model lock").entry.clone())
}

#[derive(Debug, Default, Deserialize)]
struct ReloadRequest {
    weights: Option<PathBuf>,
    variant: Option<String>,
}

async fn model_reload(
    State(state): State<SharedState>,
    body: Option<Json<ReloadRequest>>,
) -> std::result::Result<Json<ModelRegistryEntry>, ApiError> {
    let request = body.map(|Json(r)| r).unwrap_or_default();
    let current = state.model.read().expect("model lock").entry.clone();
    let weights = request.weights.unwrap_or(current.weights_path);
    let variant: ModelVariant = match request.variant {
        Some(s) => s.parse()?,
        None => current.variant.parse()?,
    };
    let loaded = tokio::task::spawn_blocking(move || load_model(&weights, variant))
        .await
        .map_err(|e| ApiError::Internal(format!("reload task failed: {e}")))??;
    let entry = loaded.entry.clone();
    *state.model.write().expect("model lock") = Arc::new(loaded);
    Ok(Json(entry))
}

async fn screen(
    State(state): State<SharedState>,
    request: Request,
) -> std::result::Result<Json<ScreeningResult>, Response> {
    let started = Instant::now();
    let bytes = read_image_body(request).await?;

    // One snapshot serves the whole request, reload or not.
    let model = Arc::clone(&state.model.read().expect("model lock"));
    let result = tokio::task::spawn_blocking(move || screen_bytes(&model, &bytes, started))
        .await
        .map_err(|e| ApiError::Internal(format!("screening task failed: {e}")).into_response())?
        .map_err(|e| ApiError::from(e).into_response())?;

    if let Some(audit) = &state.audit {
        audit.append(&result);
    }
    if let Some(url) = state.webhook.clone() {
        let client = state.http.clone();
        let payload = result.clone();
        tokio::spawn(async move {
            for attempt in 1..=3u32 {
                match client.post(&url).json(&payload).send().await {
                    Ok(resp) if resp.status().is_success() => return,
                    outcome => {
                        if attempt == 3 {
                            eprintln!("webhook delivery to {url} failed after 3 attempts: {outcome:?}");
                        }
                    }
                }
                tokio::time::sleep(std::time::Duration::from_millis(50 * attempt as u64)).await;
            }
        });
    }
    Ok(Json(result))
}

async fn read_image_body(request: Request) -> std::result::Result<Vec<u8>, Response> {
    let is_multipart = request
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if is_multipart {
        let mut multipart = Multipart::from_request(request, &())
            .await
            .map_err(|e| ApiError::BadRequest(format!("invalid multipart body: {e}")).into_response())?;
        while let Some(field) = multipart
            .next_field()
            .await
            .map_err(|e| ApiError::BadRequest(format!("invalid multipart body: {e}")).into_response())?
        {
            let bytes = field
                .bytes()
                .await
                .map_err(|e| e.into_response())?;
            if !bytes.is_empty() {
                return Ok(bytes.to_vec());
            }
        }
        Err(ApiError::BadRequest("multipart body contains no file field".into()).into_response())
    } else {
        let bytes = axum::body::Bytes::from_request(request, &())
            .await
            .map_err(|e| e.into_response())?;
        Ok(bytes.to_vec())
    }
}

/// Decode, preprocess to the model's input size, and classify.
fn screen_bytes(model: &ActiveModel, bytes: &[u8], started: Instant) -> Result<ScreeningResult> {
    let raw = decode_image_bytes(bytes)?;
    let [_, h, w] = model.graph.input_shape();
    let pixels = preprocess(&raw, &PreprocessOptions::for_target(h, w))?;
    let prediction = predict_one(&model.graph, &model.store, &pixels)?;
    Ok(ScreeningResult {
        request_id: uuid::Uuid::new_v4().to_string(),
        label: prediction.label,
        probabilities: prediction.probabilities,
        model_id: model.entry.model_id.clone(),
        processing_ms: started.elapsed().as_secs_f64() * 1e3,
        timestamp: chrono::Utc::now().to_rfc3339(),
    })
}
