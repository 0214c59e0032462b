//! HTTP summarization service with a content-addressed response cache.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::io::AsyncWriteExt;
use tokio::sync::Semaphore;

use crate::cache::{Cache, CacheEntry, EntryMetadata};
use crate::engine::{Inputs, SummaryModel};

pub const MAX_PAYLOAD: usize = 64 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub max_concurrent: usize,
    /// Requests allowed to wait for an inference slot.
    pub max_queue: usize,
    pub max_payload: usize,
    pub fetch_timeout: Duration,
    /// Permits plain-http URLs; otherwise only https is fetched.
    pub allow_http_urls: bool,
    /// Parent of the per-request transient directories.
    pub work_dir: PathBuf,
}

impl ServiceConfig {
    pub fn new(work_dir: &Path) -> Self {
        Self {
            max_concurrent: 4,
            max_queue: 16,
            max_payload: MAX_PAYLOAD,
            fetch_timeout: Duration::from_secs(60),
            allow_http_urls: false,
            work_dir: work_dir.to_path_buf(),
        }
    }
}

pub struct AppState {
    pub model: Arc<dyn SummaryModel>,
    pub cache: Cache,
    pub cfg: ServiceConfig,
    slots: Semaphore,
    pending: AtomicUsize,
    /// Number of times the model has run.
    pub invocations: AtomicU64,
    http: reqwest::Client,
}

impl AppState {
    pub fn new(model: Arc<dyn SummaryModel>, cache: Cache, cfg: ServiceConfig) -> crate::Result<Self> {
        std::fs::create_dir_all(&cfg.work_dir)
            .map_err(|e| crate::AppError::io(format!("creating {}", cfg.work_dir.display()), e))?;
        let http = reqwest::Client::builder()
            .timeout(cfg.fetch_timeout)
            .build()
            .map_err(|e| crate::AppError::Config(format!("http client: {e}")))?;
        Ok(Self {
            model,
            cache,
            slots: Semaphore::new(cfg.max_concurrent),
            cfg,
            pending: AtomicUsize::new(0),
            invocations: AtomicU64::new(0),
            http,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryResponse {
    pub summary: String,
    pub cached: bool,
    pub elapsed_ms: u64,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub model_hash: String,
}

/// URL form of a request.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UrlRequest {
    pub text_url: String,
    #[serde(default)]
    pub audio_url: Option<String>,
    #[serde(default)]
    pub video_url: Option<String>,
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl ApiError {
    fn bad(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }

    fn too_large(limit: usize) -> Self {
        Self(StatusCode::PAYLOAD_TOO_LARGE, format!("payload exceeds {limit} bytes"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.cfg.max_payload;
    Router::new()
        .route("/health", get(health))
        .route("/summarize", post(summarize))
        // Multipart framing adds a little on top of the payload itself.
        .layer(DefaultBodyLimit::max(limit + 64 * 1024))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        model_hash: st.model.model_hash().to_string(),
    })
}

/// Spools uploaded or fetched fields to files in a request-private
/// directory that is removed when the request finishes.
struct Spool {
    dir: tempfile::TempDir,
    total: usize,
    limit: usize,
    files: Vec<(&'static str, PathBuf)>,
}

impl Spool {
    fn new(cfg: &ServiceConfig) -> Result<Self, ApiError> {
        let dir = tempfile::Builder::new()
            .prefix("req-")
            .tempdir_in(&cfg.work_dir)
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("transient directory: {e}")))?;
        Ok(Self { dir, total: 0, limit: cfg.max_payload, files: Vec::new() })
    }

    async fn open(&mut self, field: &'static str) -> Result<tokio::fs::File, ApiError> {
        if self.files.iter().any(|(f, _)| *f == field) {
            return Err(ApiError::bad(format!("field {field} given twice")));
        }
        let path = self.dir.path().join(field);
        let file = tokio::fs::File::create(&path).await.map_err(internal)?;
        self.files.push((field, path));
        Ok(file)
    }

    async fn write(&mut self, file: &mut tokio::fs::File, chunk: &[u8]) -> Result<(), ApiError> {
        self.total += chunk.len();
        if self.total > self.limit {
            return Err(ApiError::too_large(self.limit));
        }
        file.write_all(chunk).await.map_err(internal)
    }

    fn inputs(&self) -> Result<Inputs, ApiError> {
        let read = |name: &str| -> Result<Option<Vec<u8>>, ApiError> {
            match self.files.iter().find(|(f, _)| *f == name) {
                Some((_, p)) => std::fs::read(p).map(Some).map_err(internal),
                None => Ok(None),
            }
        };
        let text = read("text")?.ok_or_else(|| ApiError::bad("missing required field text"))?;
        Ok(Inputs { text, audio: read("audio")?, video: read("video")? })
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

fn field_slot(name: &str) -> Result<&'static str, ApiError> {
    match name {
        "text" => Ok("text"),
        "audio" | "wav" => Ok("audio"),
        "video" => Ok("video"),
        other => Err(ApiError::bad(format!("unknown field {other:?}"))),
    }
}

async fn spool_multipart(mut mp: Multipart, spool: &mut Spool) -> Result<(), ApiError> {
    let mp_err = |e: axum::extract::multipart::MultipartError| match e.status() {
        StatusCode::PAYLOAD_TOO_LARGE => ApiError::too_large(MAX_PAYLOAD),
        s => ApiError(s, e.body_text()),
    };
    while let Some(mut field) = mp.next_field().await.map_err(mp_err)? {
        let slot = field_slot(field.name().unwrap_or(""))?;
        let mut file = spool.open(slot).await?;
        while let Some(chunk) = field.chunk().await.map_err(mp_err)? {
            spool.write(&mut file, &chunk).await?;
        }
        file.flush().await.map_err(internal)?;
    }
    Ok(())
}

async fn spool_urls(st: &AppState, req: UrlRequest, spool: &mut Spool) -> Result<(), ApiError> {
    let urls = [("text", Some(req.text_url)), ("audio", req.audio_url), ("video", req.video_url)];
    for (slot, url) in urls {
        let Some(url) = url else { continue };
        let parsed = reqwest::Url::parse(&url).map_err(|e| ApiError::bad(format!("{slot} url: {e}")))?;
        let scheme_ok = parsed.scheme() == "https" || (st.cfg.allow_http_urls && parsed.scheme() == "http");
        if !scheme_ok {
            return Err(ApiError::bad(format!("{slot} url must use https")));
        }
        let mut resp = st
            .http
            .get(parsed)
            .send()
            .await
            .and_then(|r| r.error_for_status())
            .map_err(|e| ApiError::bad(format!("fetching {slot}: {e}")))?;
        if resp.content_length().is_some_and(|n| n as usize > spool.limit) {
            return Err(ApiError::too_large(spool.limit));
        }
        let mut file = spool.open(slot).await?;
        while let Some(chunk) = resp.chunk().await.map_err(|e| ApiError::bad(format!("fetching {slot}: {e}")))? {
            spool.write(&mut file, &chunk).await?;
        }
        file.flush().await.map_err(internal)?;
    }
    Ok(())
}

/// Counts a request as pending until dropped.
struct PendingGuard<'a>(&'a AtomicUsize);

impl Drop for PendingGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn summarize(State(st): State<Arc<AppState>>, req: Request) -> Result<Json<SummaryResponse>, ApiError> {
    let start = Instant::now();
    let content_type = req.headers().get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).unwrap_or("").to_string();
    let mut spool = Spool::new(&st.cfg)?;
    if content_type.starts_with("multipart/form-data") {
        let mp = Multipart::from_request(req, &()).await.map_err(|e| ApiError::bad(e.body_text()))?;
        spool_multipart(mp, &mut spool).await?;
    } else if content_type.starts_with("application/json") {
        let Json(urls) = Json::<UrlRequest>::from_request(req, &())
            .await
            .map_err(|e| ApiError(e.status(), e.body_text()))?;
        spool_urls(&st, urls, &mut spool).await?;
    } else {
        return Err(ApiError::bad("expected multipart/form-data or application/json"));
    }
    let inputs = spool.inputs()?;
    let hash = inputs.content_hash();
    let elapsed = |s: Instant| s.elapsed().as_millis() as u64;
    let hit = |e: CacheEntry| SummaryResponse { summary: e.summary, cached: true, elapsed_ms: elapsed(start), id: e.content_hash };
    if let Some(e) = st.cache.get(&hash) {
        return Ok(Json(hit(e)));
    }

    if st.pending.fetch_add(1, Ordering::SeqCst) >= st.cfg.max_concurrent + st.cfg.max_queue {
        st.pending.fetch_sub(1, Ordering::SeqCst);
        return Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "queue is full".into()));
    }
    let _pending = PendingGuard(&st.pending);
    let _slot = st.slots.acquire().await.map_err(internal)?;
    // An identical request may have finished while this one waited.
    if let Some(e) = st.cache.get(&hash) {
        return Ok(Json(hit(e)));
    }
    let fields: Vec<(String, u64)> = inputs.fields().iter().map(|(n, b)| (n.to_string(), b.len() as u64)).collect();
    let model = Arc::clone(&st.model);
    st.invocations.fetch_add(1, Ordering::SeqCst);
    let summary = tokio::task::spawn_blocking(move || model.summarize(&inputs))
        .await
        .map_err(internal)?
        .map_err(|e| match e.exit_code() {
            1 => ApiError::bad(e.to_string()),
            _ => internal(e),
        })?;
    let entry = CacheEntry {
        content_hash: hash.clone(),
        summary: summary.clone(),
        metadata: EntryMetadata { model_hash: st.model.model_hash().to_string(), fields, elapsed_ms: elapsed(start) },
        created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    st.cache.insert(entry).map_err(internal)?;
    drop(spool);
    Ok(Json(SummaryResponse { summary, cached: false, elapsed_ms: elapsed(start), id: hash }))
}
