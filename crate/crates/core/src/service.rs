//! HTTP service over the encode, decode and retarget operations.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{ChartSpec, ChartType, THEMES};
use crate::importance::{predict_importance, ImportanceError};
use crate::metrics::{psnr, ssim};
use crate::models::{ModelError, ModelSet};
use crate::pipeline::{
    decode_blocks, encode_with_map, retarget_envelope, retarget_spec, EnvelopeError, PayloadEnvelope, PayloadKind,
    PipelineError, RetargetRequest, Retargeted, LOSSY_WARNING,
};
use crate::planner::{max_chars, PlanOptions};
use crate::qrcodec::DEFAULT_ETA;
use crate::raster::ChartImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub model_dir: PathBuf,
    /// Largest accepted payload body, in bytes.
    pub max_payload_bytes: usize,
    /// Largest accepted request, in bytes (images included).
    pub max_request_bytes: usize,
    pub host: String,
    pub port: u16,
    /// Allow `format: "jpeg"` on encode responses.
    pub allow_lossy: bool,
    pub eta: usize,
    /// Static bundle served under `/ui`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            model_dir: PathBuf::from(crate::models::DEFAULT_MODEL_DIR),
            max_payload_bytes: 32 * 1024,
            max_request_bytes: 16 * 1024 * 1024,
            host: "127.0.0.1".into(),
            port: 8080,
            allow_lossy: false,
            eta: DEFAULT_ETA,
            ui_dir: Some(PathBuf::from("webui/dist")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Models(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ServiceConfig {
    pub fn from_json_file(path: &FsPath) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ServiceConfig = serde_json::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.max_payload_bytes == 0 || self.max_request_bytes == 0 {
            return Err(ServiceError::Config("size limits must be positive".into()));
        }
        if self.eta == 0 {
            return Err(ServiceError::Config("eta must be positive".into()));
        }
        Ok(())
    }
}

struct AppState {
    models: Arc<ModelSet>,
    config: ServiceConfig,
}

/// Error body `{ok:false, error:{code, message, correlation_id, details?}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    details: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), details: None }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn with(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }

    fn from_status(status: StatusCode, message: String) -> Self {
        match status {
            StatusCode::PAYLOAD_TOO_LARGE => Self::new(status, "payload_too_large", message),
            s if s.is_client_error() => Self::new(s, "malformed", message),
            s => Self::new(s, "internal", message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let id = format!("{:016x}", rand::random::<u64>());
        if self.status.is_server_error() {
            log::error!("[{id}] {} {}", self.code, self.message);
        } else {
            log::info!("[{id}] {} {}", self.code, self.message);
        }
        let mut error = json!({ "code": self.code, "message": self.message, "correlation_id": id });
        if let Some(d) = self.details {
            error["details"] = d;
        }
        (self.status, Json(json!({ "ok": false, "error": error }))).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        let unproc = StatusCode::UNPROCESSABLE_ENTITY;
        match e {
            PipelineError::CapacityExceeded { needed, placed, max_chars } => {
                Self::new(unproc, "capacity_exceeded", msg).with(json!({ "needed": needed, "placed": placed, "max_chars": max_chars }))
            }
            PipelineError::NoPositionCode => Self::new(unproc, "no_position_code", msg),
            PipelineError::BlockDecodeFailed { index, .. } => Self::new(unproc, "block_decode_failed", msg).with(json!({ "index": index })),
            PipelineError::ChecksumMismatch { recovered, total, .. } => {
                Self::new(unproc, "checksum_mismatch", msg).with(json!({ "recovered": recovered, "total": total }))
            }
            PipelineError::WrongPayloadKind(kind) => Self::new(unproc, "wrong_payload_kind", msg).with(json!({ "kind": kind.name() })),
            PipelineError::IncompatibleRetarget { from, to, allowed } => {
                Self::new(unproc, "incompatible_retarget", msg).with(json!({ "from": from, "to": to, "allowed": allowed }))
            }
            PipelineError::UnknownTheme(_) => Self::bad_request("unknown_theme", msg).with(json!({ "themes": THEMES })),
            PipelineError::Envelope(EnvelopeError::TooLong) => Self::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", msg),
            PipelineError::Importance(ImportanceError::ImageTooSmall(..)) => Self::bad_request("image_too_small", msg),
            PipelineError::Corpus(_) => Self::new(unproc, "invalid_spec", msg),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg),
        }
    }
}

type ApiResult = Result<Response, ApiError>;

fn ok(data: Value) -> ApiResult {
    Ok(Json(json!({ "ok": true, "data": data })).into_response())
}

/// Request fields from either a JSON object or a multipart form.
#[derive(Default, Debug)]
struct Form {
    texts: HashMap<String, String>,
    files: HashMap<String, Vec<u8>>,
}

impl Form {
    async fn read(req: Request) -> Result<Form, ApiError> {
        let multipart = req
            .headers()
            .get(header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|ct| ct.starts_with("multipart/form-data"));
        let mut form = Form::default();
        if multipart {
            let mut mp = Multipart::from_request(req, &()).await.map_err(|e| ApiError::from_status(e.status(), e.body_text()))?;
            loop {
                let field = mp.next_field().await.map_err(|e| ApiError::from_status(e.status(), e.body_text()))?;
                let Some(field) = field else { break };
                let name = field.name().unwrap_or_default().to_string();
                let is_file = field.file_name().is_some() || name == "image";
                let bytes = field.bytes().await.map_err(|e| ApiError::from_status(e.status(), e.body_text()))?;
                if is_file {
                    form.files.insert(name, bytes.to_vec());
                } else {
                    let text = String::from_utf8(bytes.to_vec())
                        .map_err(|_| ApiError::bad_request("malformed", format!("field {name:?} is not UTF-8")))?;
                    form.texts.insert(name, text);
                }
            }
        } else {
            let body = Bytes::from_request(req, &()).await.map_err(|e| ApiError::from_status(e.status(), e.body_text()))?;
            let map: serde_json::Map<String, Value> =
                serde_json::from_slice(&body).map_err(|e| ApiError::bad_request("malformed", format!("request body: {e}")))?;
            for (k, v) in map {
                let text = match v {
                    Value::Null => continue,
                    Value::String(s) => s,
                    other => other.to_string(),
                };
                form.texts.insert(k, text);
            }
        }
        Ok(form)
    }

    fn text(&self, name: &str) -> Option<&str> {
        self.texts.get(name).map(|s| s.as_str()).filter(|s| !s.is_empty())
    }

    /// Raw upload, or a base64 string (a `data:` URL prefix is allowed).
    fn bytes(&self, name: &str) -> Result<Option<Vec<u8>>, ApiError> {
        if let Some(b) = self.files.get(name) {
            return Ok(Some(b.clone()));
        }
        let Some(s) = self.text(name) else { return Ok(None) };
        let s = match s.find(";base64,") {
            Some(i) if s.starts_with("data:") => &s[i + 8..],
            _ => s,
        };
        B64.decode(s.trim()).map(Some).map_err(|e| ApiError::bad_request("malformed", format!("field {name:?}: bad base64: {e}")))
    }

    fn image(&self) -> Result<ChartImage, ApiError> {
        let bytes = self.bytes("image")?.ok_or_else(|| ApiError::bad_request("malformed", "missing field \"image\""))?;
        ChartImage::decode(&bytes).map_err(|e| ApiError::bad_request("bad_image", e.to_string()))
    }

    fn parse<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>, ApiError>
    where
        T::Err: std::fmt::Display,
    {
        self.text(name)
            .map(|s| s.trim().parse::<T>().map_err(|e| ApiError::bad_request("malformed", format!("field {name:?}: {e}"))))
            .transpose()
    }
}

async fn blocking<F>(f: F) -> ApiResult
where
    F: FnOnce() -> ApiResult + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", format!("worker failed: {e}"))))
}

async fn health(State(s): State<Arc<AppState>>) -> Response {
    Json(json!({ "ok": true, "models": s.models.describe() })).into_response()
}

async fn encode(State(s): State<Arc<AppState>>, req: Request) -> ApiResult {
    let form = Form::read(req).await?;
    blocking(move || encode_form(&s, &form)).await
}

fn encode_form(s: &AppState, form: &Form) -> ApiResult {
    let image = form.image()?.quantize();
    let kind: PayloadKind = form.parse("kind")?.unwrap_or(PayloadKind::Metadata);
    let body = match form.bytes("payload_base64")? {
        Some(b) => b,
        None => form.text("payload").ok_or_else(|| ApiError::bad_request("malformed", "missing field \"payload\""))?.as_bytes().to_vec(),
    };
    if body.len() > s.config.max_payload_bytes {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "payload_too_large",
            format!("payload of {} bytes exceeds the limit of {}", body.len(), s.config.max_payload_bytes),
        ));
    }
    let eta: usize = form.parse("eta")?.unwrap_or(s.config.eta);
    if eta == 0 {
        return Err(ApiError::bad_request("malformed", "eta must be positive"));
    }
    let lossy = match form.text("format").unwrap_or("png") {
        "png" => false,
        "jpeg" | "jpg" if s.config.allow_lossy => true,
        "jpeg" | "jpg" => return Err(ApiError::bad_request("lossy_refused", LOSSY_WARNING)),
        other => return Err(ApiError::bad_request("malformed", format!("unsupported format {other:?}"))),
    };
    let env = PayloadEnvelope::new(kind, body);
    let v = predict_importance(&image, &s.models.importance).map_err(PipelineError::from)?;
    let coded = encode_with_map(&image, &env, &v, &s.models.stego, eta, &PlanOptions::default())?;
    let png = coded.image.encode_png().map_err(PipelineError::from)?;
    let (out, format) = if lossy { (coded.image.encode_jpeg(90).map_err(PipelineError::from)?, "jpeg") } else { (png, "png") };
    let mut data = json!({
        "image": B64.encode(&out),
        "format": format,
        "psnr": psnr(&image, &coded.image).map_err(PipelineError::from)?,
        "ssim": ssim(&image, &coded.image).map_err(PipelineError::from)?,
        "kind": kind.name(),
        "bytes": env.serialized_len(),
        "blocks": coded.plan.content_boxes.len(),
        "max_chars": max_chars(image.dims(), eta),
        "plan": serde_json::to_value(&coded.plan).expect("plans serialize"),
    });
    if lossy {
        data["warning"] = json!(LOSSY_WARNING);
    }
    ok(data)
}

async fn decode(State(s): State<Arc<AppState>>, req: Request) -> ApiResult {
    let form = Form::read(req).await?;
    blocking(move || decode_form(&s, &form)).await
}

fn decode_form(s: &AppState, form: &Form) -> ApiResult {
    let image = form.image()?;
    let report = decode_blocks(&image, &s.models.stego)?;
    let blocks = report.statuses();
    let env = report.envelope().map_err(|e| {
        ApiError::from(e).with(json!({ "orientation": report.orientation, "blocks": blocks, "partial_base64": B64.encode(report.partial()) }))
    })?;
    let mut data = json!({
        "kind": env.kind.name(),
        "body": env.body_text(),
        "body_base64": B64.encode(&env.body),
        "utf8": std::str::from_utf8(&env.body).is_ok(),
        "orientation": report.orientation,
        "blocks": blocks,
    });
    if env.kind == PayloadKind::Spec {
        if let Ok(spec) = ChartSpec::from_json(&env.body_text()) {
            data["allowed"] = json!(spec.chart_type.compatible_targets());
            data["spec"] = serde_json::to_value(&spec).expect("specs serialize");
        }
    }
    ok(data)
}

async fn retarget(State(s): State<Arc<AppState>>, req: Request) -> ApiResult {
    let form = Form::read(req).await?;
    blocking(move || retarget_form(&s, &form)).await
}

fn retarget_form(s: &AppState, form: &Form) -> ApiResult {
    let request = RetargetRequest {
        chart_type: form.parse::<ChartType>("chart_type")?,
        theme: form.text("theme").map(str::to_string),
        bandwidth: form.parse::<f64>("bandwidth")?,
    };
    if request.bandwidth.is_some_and(|b| !(b.is_finite() && b > 0.0)) {
        return Err(ApiError::bad_request("malformed", "bandwidth must be positive"));
    }
    let Retargeted { chart, allowed } = match form.text("spec") {
        Some(text) => {
            let spec = ChartSpec::from_json(text).map_err(|e| ApiError::bad_request("invalid_spec", e.to_string()))?;
            retarget_spec(&spec, &request)?
        }
        None => {
            let report = decode_blocks(&form.image()?, &s.models.stego)?;
            retarget_envelope(&report.envelope()?, &request)?
        }
    };
    ok(json!({
        "image": B64.encode(chart.image.encode_png().map_err(PipelineError::from)?),
        "format": "png",
        "spec": serde_json::to_value(&chart.spec).expect("specs serialize"),
        "allowed": allowed,
    }))
}

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "ico" => "image/x-icon",
        "wasm" => "application/wasm",
        "woff2" => "font/woff2",
        "txt" => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

async fn ui_file(State(s): State<Arc<AppState>>, path: Option<Path<String>>) -> ApiResult {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such UI asset");
    let root = s.config.ui_dir.clone().ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", "no UI bundle configured"))?;
    let rel = path.map(|Path(p)| p).unwrap_or_default();
    let rel = PathBuf::from(if rel.is_empty() { "index.html".to_string() } else { rel });
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(not_found());
    }
    let mut full = root.join(&rel);
    if full.is_dir() {
        full = full.join("index.html");
    }
    let bytes = tokio::fs::read(&full).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, content_type(&full))], Body::from(bytes)).into_response())
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

/// All routes over already-loaded models.
pub fn router(models: Arc<ModelSet>, config: ServiceConfig) -> Router {
    let limit = config.max_request_bytes;
    let state = Arc::new(AppState { models, config });
    Router::new()
        .route("/api/health", get(health))
        .route("/api/encode", post(encode))
        .route("/api/decode", post(decode))
        .route("/api/retarget", post(retarget))
        .route("/ui", get(|| async { Redirect::permanent("/ui/") }))
        .route("/ui/", get(ui_file))
        .route("/ui/{*path}", get(ui_file))
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Load the checkpoints (refusing to start without them) and serve until ctrl-c.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    config.validate()?;
    let models = Arc::new(ModelSet::load(&config.model_dir)?);
    let addr: SocketAddr = format!("{}:{}", config.host, config.port)
        .parse()
        .map_err(|e| ServiceError::Config(format!("bad listen address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(models, config))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
