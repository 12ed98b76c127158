//! JSON-over-HTTP inference: generation, completion and classification.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::error::{Error, Result};
use crate::primitives::{abstract_sketch, reconstruct_raw};
use crate::render::{repair_tokens, to_svg, tokens_to_polylines};
use crate::sampling::{complete, completion_prefix, SamplerConfig, StopReason};
use crate::stroke_data::{normalize_with_scale, Sketch, Stroke3Point, CORPUS_FORMAT_VERSION};
use crate::tokenizer::{decode, encode, pad_or_truncate, tokenize_sketch, TokenId};
use crate::training::{load_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};

/// Classes returned by `/v1/classify` at most.
pub const CLASSIFY_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Limits {
    pub max_num_samples: usize,
    pub max_prefix_points: usize,
    pub max_new_tokens: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_num_samples: 8,
            max_prefix_points: 2000,
            max_new_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    /// Completion and generation model per class name.
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub classifier: Option<PathBuf>,
    pub limits: Limits,
    /// Origins allowed by CORS; empty disables the CORS layer.
    pub cors_origins: Vec<String>,
    pub canvas_px: u32,
    pub stroke_width: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            checkpoints: BTreeMap::new(),
            classifier: None,
            limits: Limits::default(),
            cors_origins: Vec::new(),
            canvas_px: 256,
            stroke_width: 2.0,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoints.is_empty() && self.classifier.is_none() {
            return Err(Error::Config("service needs at least one checkpoint".into()));
        }
        let l = &self.limits;
        if l.max_num_samples == 0 || l.max_prefix_points == 0 || l.max_new_tokens == 0 {
            return Err(Error::Config("service limits must be positive".into()));
        }
        self.bind
            .parse::<SocketAddr>()
            .map_err(|e| Error::Config(format!("bind address `{}`: {e}", self.bind)))?;
        for origin in &self.cors_origins {
            HeaderValue::from_str(origin).map_err(|_| Error::Config(format!("bad CORS origin `{origin}`")))?;
        }
        Ok(())
    }
}

/// A checkpoint file that is loaded on first use and retried until it loads.
#[derive(Debug)]
struct Slot {
    path: Option<PathBuf>,
    loaded: RwLock<Option<Arc<Checkpoint<f32>>>>,
}

impl Slot {
    fn from_path(path: PathBuf) -> Self {
        let slot = Self {
            path: Some(path),
            loaded: RwLock::new(None),
        };
        if let Err(e) = slot.get() {
            log::warn!("{e}");
        }
        slot
    }

    fn ready(ckpt: Checkpoint<f32>) -> Self {
        Self {
            path: None,
            loaded: RwLock::new(Some(Arc::new(ckpt))),
        }
    }

    fn get(&self) -> std::result::Result<Arc<Checkpoint<f32>>, String> {
        if let Some(c) = self.loaded.read().expect("slot lock").as_ref() {
            return Ok(c.clone());
        }
        let path = self.path.as_deref().ok_or("checkpoint not loaded")?;
        let ckpt = Arc::new(load_checkpoint::<f32>(path).map_err(|e| format!("checkpoint not loaded: {e}"))?);
        *self.loaded.write().expect("slot lock") = Some(ckpt.clone());
        log::info!("loaded checkpoint {}", path.display());
        Ok(ckpt)
    }
}

/// Shared, read-only inference state behind the router.
#[derive(Debug)]
pub struct ServiceState {
    config: ServiceConfig,
    generators: BTreeMap<String, Slot>,
    classifier: Option<Slot>,
}

impl ServiceState {
    /// Loads every configured checkpoint. Files that fail to load are
    /// retried on each request and reported as unavailable meanwhile.
    pub fn new(config: ServiceConfig) -> Result<Self> {
        config.validate()?;
        let generators = config
            .checkpoints
            .iter()
            .map(|(name, path)| (name.clone(), Slot::from_path(path.clone())))
            .collect();
        let classifier = config.classifier.clone().map(Slot::from_path);
        Ok(Self {
            config,
            generators,
            classifier,
        })
    }

    /// State over in-memory checkpoints.
    pub fn from_checkpoints(
        config: ServiceConfig,
        generators: BTreeMap<String, Checkpoint<f32>>,
        classifier: Option<Checkpoint<f32>>,
    ) -> Self {
        Self {
            config,
            generators: generators.into_iter().map(|(n, c)| (n, Slot::ready(c))).collect(),
            classifier: classifier.map(Slot::ready),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub class: String,
    #[serde(default)]
    pub strokes: Vec<[f64; 3]>,
    #[serde(default = "default_samples")]
    pub num_samples: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub class: String,
    #[serde(default = "default_samples")]
    pub num_samples: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub strokes: Vec<[f64; 3]>,
}

fn default_samples() -> usize {
    1
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    /// Full sketch in stroke-3, starting with the submitted points.
    pub strokes: Vec<[f64; 3]>,
    pub svg: String,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub completions: Vec<Completion>,
    pub prefix_token_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbability {
    pub class: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub topk: Vec<ClassProbability>,
    pub k: usize,
}

/// Error response: status plus `{"error": ..., "limit": {...}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub limit: Option<(&'static str, usize)>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            limit: None,
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn limit(name: &'static str, value: usize, got: usize) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: format!("{name} is {value}, request asked for {got}"),
            limit: Some((name, value)),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::DegenerateGeometry(_)
            | Error::InvalidSketch(_)
            | Error::ZeroStroke
            | Error::NonFinite(_)
            | Error::Token { .. } => Self::unprocessable(e.to_string()),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some((name, value)) = self.limit {
            body["limit"] = json!({ "name": name, "value": value });
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable(format!("malformed request: {e}")))
}

fn parse_points(strokes: &[[f64; 3]]) -> ApiResult<Vec<Stroke3Point>> {
    strokes
        .iter()
        .enumerate()
        .map(|(i, &[dx, dy, pen])| {
            if !(dx.is_finite() && dy.is_finite()) {
                return Err(ApiError::unprocessable(format!(
                    "malformed strokes: point {i} is not finite"
                )));
            }
            match pen {
                0.0 => Ok(Stroke3Point::new(dx, dy, false)),
                1.0 => Ok(Stroke3Point::new(dx, dy, true)),
                _ => Err(ApiError::unprocessable(format!(
                    "malformed strokes: point {i} has pen {pen}, expected 0 or 1"
                ))),
            }
        })
        .collect()
}

fn stroke_rows(points: &[Stroke3Point]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p.dx, p.dy, p.pen() as f64]).collect()
}

/// Completes raw stroke-3 points with a per-class model.
///
/// The submitted points come back verbatim; continuations are scaled back to
/// the input's coordinate range. An empty prefix generates from scratch in
/// normalized units.
pub fn complete_sketch(
    ckpt: &Checkpoint<f32>,
    points: &[Stroke3Point],
    sampler: &SamplerConfig,
    canvas_px: u32,
    stroke_width: f64,
) -> Result<CompletionResponse> {
    let dict = ckpt.dictionary()?;
    let vocab = ckpt.vocabulary();
    let (prefix, scale) = if points.is_empty() {
        (vec![vocab.bos()], 1.0)
    } else {
        let (normalized, scale) = normalize_with_scale(&Sketch::new(points.to_vec(), None)?)?;
        let seq = encode(&abstract_sketch(&normalized, &dict)?, &vocab)?;
        (completion_prefix(&seq, &vocab), scale)
    };
    let max_len = ckpt.model.config().max_seq_len;
    if prefix.len() >= max_len {
        return Err(Error::SequenceTooLong {
            len: prefix.len(),
            max: max_len - 1,
        });
    }
    let result = complete(&ckpt.model, &prefix, sampler)?;
    let mut completions = Vec::with_capacity(result.samples.len());
    for sample in &result.samples {
        let tail = &sample.tokens[prefix.len()..];
        let mut strokes = stroke_rows(points);
        strokes.extend(stroke_rows(&continuation_points(
            tail,
            ckpt,
            scale,
            !points.is_empty(),
        )?));
        let rendering = tokens_to_polylines(&sample.tokens, &dict, &vocab, true)?;
        completions.push(Completion {
            strokes,
            svg: to_svg(&rendering.polylines, stroke_width, canvas_px),
            stop_reason: sample.stop_reason,
        });
    }
    Ok(CompletionResponse {
        completions,
        prefix_token_count: prefix.len(),
        seed: sampler.seed,
    })
}

/// Stroke-3 offsets for sampled tokens that follow a prefix.
///
/// After a prefix, a continuation that keeps drawing is joined to the
/// prefix's last point by a zero-length pen-down point.
fn continuation_points(
    tail: &[TokenId],
    ckpt: &Checkpoint<f32>,
    scale: f64,
    after_prefix: bool,
) -> Result<Vec<Stroke3Point>> {
    let vocab = ckpt.vocabulary();
    let mut ids = vec![vocab.bos()];
    ids.extend_from_slice(tail);
    let (fixed, _) = repair_tokens(&ids, &vocab);
    let abs = decode(&fixed, &vocab)?;
    if abs.runs.is_empty() {
        return Ok(Vec::new());
    }
    let raw = reconstruct_raw(&abs, &ckpt.dictionary()?)?;
    let skip = usize::from(after_prefix && abs.runs[0].pen_up_move);
    Ok(raw.points()[skip..]
        .iter()
        .map(|p| Stroke3Point::new(p.dx * scale, p.dy * scale, p.pen_up))
        .collect())
}

/// Class probabilities of a raw sketch, most likely first, ties to the lower
/// class index.
pub fn classify_sketch(ckpt: &Checkpoint<f32>, points: &[Stroke3Point]) -> Result<Vec<ClassProbability>> {
    let dict = ckpt.dictionary()?;
    let vocab = ckpt.vocabulary();
    let sketch = Sketch::new(points.to_vec(), None)?;
    let seq = tokenize_sketch(&sketch, &dict, &vocab)?;
    let (cut, _) = pad_or_truncate(&seq, ckpt.model.config().max_seq_len, &vocab);
    let logits = ckpt.model.forward_classify(&cut.ids()[..cut.attention_length()])?;
    let z: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let mut ranked: Vec<ClassProbability> = exp
        .iter()
        .enumerate()
        .map(|(i, e)| ClassProbability {
            class: ckpt.class_names.get(i).cloned().unwrap_or_else(|| format!("class_{i}")),
            probability: e / total,
        })
        .collect();
    // stable sort keeps the lower index first among equal probabilities
    ranked.sort_by(|a, b| b.probability.total_cmp(&a.probability));
    Ok(ranked)
}

fn run_complete(state: &ServiceState, req: CompleteRequest) -> ApiResult<CompletionResponse> {
    let slot = state
        .generators
        .get(&req.class)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown class `{}`", req.class)))?;
    if !(req.temperature > 0.0 && req.temperature.is_finite()) {
        return Err(ApiError::unprocessable(format!(
            "temperature must be > 0, got {}",
            req.temperature
        )));
    }
    let limits = &state.config.limits;
    if req.num_samples == 0 {
        return Err(ApiError::unprocessable("num_samples must be at least 1"));
    }
    if req.num_samples > limits.max_num_samples {
        return Err(ApiError::limit(
            "max_num_samples",
            limits.max_num_samples,
            req.num_samples,
        ));
    }
    if req.strokes.len() > limits.max_prefix_points {
        return Err(ApiError::limit(
            "max_prefix_points",
            limits.max_prefix_points,
            req.strokes.len(),
        ));
    }
    let points = parse_points(&req.strokes)?;
    let ckpt = slot
        .get()
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e))?;
    let sampler = SamplerConfig {
        temperature: req.temperature,
        max_new_tokens: limits.max_new_tokens,
        seed: req.seed.unwrap_or_else(|| rand::random::<u32>() as u64),
        num_samples: req.num_samples,
        ..SamplerConfig::default()
    };
    complete_sketch(
        &ckpt,
        &points,
        &sampler,
        state.config.canvas_px,
        state.config.stroke_width,
    )
    .map_err(|e| match e {
        Error::SequenceTooLong { max, len } => ApiError::limit("max_seq_len", max, len),
        other => other.into(),
    })
}

fn run_classify(state: &ServiceState, req: ClassifyRequest) -> ApiResult<ClassifyResponse> {
    let slot = state
        .classifier
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no classifier configured"))?;
    let limits = &state.config.limits;
    if req.strokes.len() > limits.max_prefix_points {
        return Err(ApiError::limit(
            "max_prefix_points",
            limits.max_prefix_points,
            req.strokes.len(),
        ));
    }
    let points = parse_points(&req.strokes)?;
    if points.is_empty() {
        return Err(ApiError::unprocessable("degenerate geometry: sketch has no points"));
    }
    let ckpt = slot
        .get()
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e))?;
    let mut topk = classify_sketch(&ckpt, &points)?;
    topk.truncate(CLASSIFY_TOP_K);
    Ok(ClassifyResponse { k: topk.len(), topk })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

async fn complete_handler(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<Json<CompletionResponse>> {
    let req: CompleteRequest = parse_body(&body)?;
    blocking(move || run_complete(&state, req)).await.map(Json)
}

async fn generate_handler(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<Json<CompletionResponse>> {
    let req: GenerateRequest = parse_body(&body)?;
    let req = CompleteRequest {
        class: req.class,
        strokes: Vec::new(),
        num_samples: req.num_samples,
        temperature: req.temperature,
        seed: req.seed,
    };
    blocking(move || run_complete(&state, req)).await.map(Json)
}

async fn classify_handler(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<Json<ClassifyResponse>> {
    let req: ClassifyRequest = parse_body(&body)?;
    blocking(move || run_classify(&state, req)).await.map(Json)
}

async fn health_handler(State(state): State<Arc<ServiceState>>) -> Response {
    let report = tokio::task::spawn_blocking(move || health(&state)).await;
    match report {
        Ok((healthy, body)) => {
            let status = if healthy {
                StatusCode::OK
            } else {
                StatusCode::SERVICE_UNAVAILABLE
            };
            (status, Json(body)).into_response()
        }
        Err(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

fn health(state: &ServiceState) -> (bool, serde_json::Value) {
    let mut loaded = Vec::new();
    let mut missing = Vec::new();
    let slots = state
        .generators
        .iter()
        .map(|(n, s)| (n.as_str(), s))
        .chain(state.classifier.iter().map(|s| ("classifier", s)));
    for (name, slot) in slots {
        match slot.get() {
            Ok(_) => loaded.push(name.to_string()),
            Err(_) => missing.push(name.to_string()),
        }
    }
    let healthy = missing.is_empty();
    let body = json!({
        "status": if healthy { "ok" } else { "unavailable" },
        "loaded_checkpoints": loaded,
        "missing_checkpoints": missing,
        "versions": {
            "checkpoint_format": CHECKPOINT_FORMAT_VERSION,
            "corpus_format": CORPUS_FORMAT_VERSION,
            "service": env!("CARGO_PKG_VERSION"),
        },
    });
    (healthy, body)
}

/// Routes for the four `/v1` endpoints, with CORS when origins are configured.
pub fn router(state: Arc<ServiceState>) -> Router {
    let origins: Vec<HeaderValue> = state
        .config
        .cors_origins
        .iter()
        .filter_map(|o| HeaderValue::from_str(o).ok())
        .collect();
    let router = Router::new()
        .route("/v1/complete", post(complete_handler))
        .route("/v1/generate", post(generate_handler))
        .route("/v1/classify", post(classify_handler))
        .route("/v1/health", get(health_handler))
        .with_state(state);
    if origins.is_empty() {
        router
    } else {
        router.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::list(origins))
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([axum::http::header::CONTENT_TYPE]),
        )
    }
}

/// Binds the configured address and serves until Ctrl-C.
pub async fn serve(state: Arc<ServiceState>) -> Result<()> {
    let bind = state.config.bind.clone();
    let listener = tokio::net::TcpListener::bind(&bind)
        .await
        .map_err(|e| Error::io(Path::new(&bind), e))?;
    log::info!("listening on {bind}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(Path::new(&bind), e))
}
