//! In-memory job store, FIFO worker pool and the `/api/v1` HTTP surface.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use livestyle::image::ImageTensor;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Notify;

use crate::engine::{is_checkpoint_name, prepare_image, Engine, EngineError, JobParams, ModelKind};

#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    pub max_upload_bytes: usize,
    pub worker_count: usize,
    pub max_image_side: usize,
    pub job_retention: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_upload_bytes: 10 * 1024 * 1024,
            worker_count: 2,
            max_image_side: 256,
            job_retention: Duration::from_secs(3600),
        }
    }
}

impl ServiceConfig {
    /// Defaults overridden by `LIVESTYLE_WORKERS`, `LIVESTYLE_MAX_UPLOAD_BYTES`,
    /// `LIVESTYLE_MAX_IMAGE_SIDE` and `LIVESTYLE_JOB_RETENTION_SECS`.
    pub fn from_env() -> Result<Self, String> {
        let mut cfg = ServiceConfig::default();
        let read = |key: &str| -> Result<Option<u64>, String> {
            match std::env::var(key) {
                Ok(v) => v.trim().parse().map(Some).map_err(|_| format!("{key}={v:?} is not a positive integer")),
                Err(_) => Ok(None),
            }
        };
        if let Some(v) = read("LIVESTYLE_WORKERS")? {
            cfg.worker_count = v as usize;
        }
        if let Some(v) = read("LIVESTYLE_MAX_UPLOAD_BYTES")? {
            cfg.max_upload_bytes = v as usize;
        }
        if let Some(v) = read("LIVESTYLE_MAX_IMAGE_SIDE")? {
            cfg.max_image_side = v as usize;
        }
        if let Some(v) = read("LIVESTYLE_JOB_RETENTION_SECS")? {
            cfg.job_retention = Duration::from_secs(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_upload_bytes == 0 || self.worker_count == 0 || self.max_image_side == 0 || self.job_retention.is_zero() {
            return Err("max_upload_bytes, worker_count, max_image_side and job_retention must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

struct Job {
    model: ModelKind,
    params: JobParams,
    status: JobStatus,
    submitted_at: DateTime<Utc>,
    started_at: Option<DateTime<Utc>>,
    finished_at: Option<DateTime<Utc>>,
    finished: Option<Instant>,
    inputs: Option<(ImageTensor, Option<ImageTensor>)>,
    result: Option<Vec<u8>>,
    error: Option<String>,
}

/// Status document served by `GET /jobs/{id}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub id: String,
    pub model: ModelKind,
    pub status: JobStatus,
    pub submitted_at: DateTime<Utc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result_url: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub queue_depth: usize,
    pub workers_busy: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub kind: String,
    pub description: String,
    pub default_params: Value,
}

#[derive(Debug, PartialEq, Eq)]
pub enum Lookup<T> {
    Found(T),
    Unknown,
    Expired,
}

#[derive(Default)]
struct Store {
    jobs: HashMap<String, Job>,
    queue: VecDeque<String>,
    expired: HashSet<String>,
    closing: bool,
}

struct Shared {
    config: ServiceConfig,
    engine: Engine,
    registry: Vec<ModelKind>,
    store: Mutex<Store>,
    work: Condvar,
    busy: AtomicUsize,
    finished: Notify,
}

/// Job queue plus its worker threads. Cloning shares the same service.
#[derive(Clone)]
pub struct JobService {
    shared: Arc<Shared>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl JobService {
    /// Starts `config.worker_count` workers serving every registered model.
    pub fn start(config: ServiceConfig, engine: Engine) -> Self {
        Self::with_registry(config, engine, ModelKind::ALL.to_vec())
    }

    pub fn with_registry(config: ServiceConfig, engine: Engine, mut registry: Vec<ModelKind>) -> Self {
        registry.sort_by_key(|m| m.name());
        registry.dedup();
        let shared = Arc::new(Shared {
            config,
            engine,
            registry,
            store: Mutex::new(Store::default()),
            work: Condvar::new(),
            busy: AtomicUsize::new(0),
            finished: Notify::new(),
        });
        let workers = (0..shared.config.worker_count)
            .map(|i| {
                let shared = shared.clone();
                std::thread::Builder::new()
                    .name(format!("livestyle-worker-{i}"))
                    .spawn(move || worker_loop(&shared))
                    .expect("spawn worker")
            })
            .collect();
        JobService {
            shared,
            workers: Arc::new(Mutex::new(workers)),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.shared.config
    }

    pub fn models(&self) -> Vec<ModelEntry> {
        self.shared
            .registry
            .iter()
            .map(|m| ModelEntry {
                name: m.name().into(),
                kind: m.kind().into(),
                description: m.description().into(),
                default_params: m.default_params(),
            })
            .collect()
    }

    pub fn model(&self, name: &str) -> Option<ModelKind> {
        ModelKind::parse(name).filter(|m| self.shared.registry.contains(m))
    }

    /// Validates and enqueues a job; returns its id.
    pub fn submit(&self, model: ModelKind, params: &Value, content: &[u8], style: Option<&[u8]>) -> Result<String, EngineError> {
        if !self.shared.registry.contains(&model) {
            return Err(EngineError::UnknownModel);
        }
        let params = JobParams::parse(model, params)?;
        if let Some(reference) = params.checkpoint() {
            if !is_checkpoint_name(reference) {
                return Err(EngineError::InvalidParams(format!("checkpoint {reference:?} is not a bare name")));
            }
            self.shared
                .engine
                .resolve_checkpoint(reference)
                .map_err(|e| EngineError::InvalidParams(e.to_string()))?;
        }
        let side = self.shared.config.max_image_side;
        let content = prepare_image(content, side)?;
        let style = match (model.needs_style(), style) {
            (true, None) => return Err(EngineError::InvalidImage("style image required".into())),
            (true, Some(bytes)) => Some(prepare_image(bytes, side)?),
            (false, _) => None,
        };
        let id = uuid::Uuid::new_v4().simple().to_string();
        let mut store = self.shared.store.lock().unwrap();
        if store.closing {
            return Err(EngineError::InvalidParams("service is shutting down".into()));
        }
        store.jobs.insert(
            id.clone(),
            Job {
                model,
                params,
                status: JobStatus::Queued,
                submitted_at: Utc::now(),
                started_at: None,
                finished_at: None,
                finished: None,
                inputs: Some((content, style)),
                result: None,
                error: None,
            },
        );
        store.queue.push_back(id.clone());
        drop(store);
        self.shared.work.notify_one();
        Ok(id)
    }

    pub fn job(&self, id: &str) -> Lookup<JobView> {
        let mut store = self.shared.store.lock().unwrap();
        self.evict(&mut store);
        match store.jobs.get(id) {
            Some(job) => Lookup::Found(JobView {
                id: id.to_string(),
                model: job.model,
                status: job.status,
                submitted_at: job.submitted_at,
                started_at: job.started_at,
                finished_at: job.finished_at,
                error: job.error.clone(),
                result_url: job.result.as_ref().map(|_| format!("/api/v1/jobs/{id}/result")),
            }),
            None if store.expired.contains(id) => Lookup::Expired,
            None => Lookup::Unknown,
        }
    }

    /// PNG bytes of a finished job; `Found(None)` while it is not DONE.
    pub fn result(&self, id: &str) -> Lookup<Option<Vec<u8>>> {
        let mut store = self.shared.store.lock().unwrap();
        self.evict(&mut store);
        match store.jobs.get(id) {
            Some(job) => Lookup::Found(job.result.clone()),
            None if store.expired.contains(id) => Lookup::Expired,
            None => Lookup::Unknown,
        }
    }

    /// Waits until the job is DONE or FAILED.
    pub async fn wait(&self, id: &str) -> Lookup<JobView> {
        loop {
            let notified = self.shared.finished.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            match self.job(id) {
                Lookup::Found(view) if !view.status.is_terminal() => notified.await,
                other => return other,
            }
        }
    }

    pub fn health(&self) -> Health {
        let store = self.shared.store.lock().unwrap();
        Health {
            status: "ok".into(),
            queue_depth: store.queue.len(),
            workers_busy: self.shared.busy.load(Ordering::SeqCst),
        }
    }

    /// Fails every queued job, lets running ones finish and joins the workers.
    pub fn shutdown(&self) {
        {
            let mut store = self.shared.store.lock().unwrap();
            store.closing = true;
            while let Some(id) = store.queue.pop_front() {
                if let Some(job) = store.jobs.get_mut(&id) {
                    finish(job, Err("service shut down before the job started".into()));
                }
            }
        }
        self.shared.work.notify_all();
        self.shared.finished.notify_waiters();
        let handles: Vec<_> = self.workers.lock().unwrap().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }

    fn evict(&self, store: &mut Store) {
        let retention = self.shared.config.job_retention;
        let stale: Vec<String> = store
            .jobs
            .iter()
            .filter(|(_, j)| j.finished.is_some_and(|t| t.elapsed() > retention))
            .map(|(id, _)| id.clone())
            .collect();
        for id in stale {
            store.jobs.remove(&id);
            store.expired.insert(id);
        }
    }
}

fn finish(job: &mut Job, outcome: Result<Vec<u8>, String>) {
    job.inputs = None;
    job.finished_at = Some(Utc::now());
    job.finished = Some(Instant::now());
    match outcome {
        Ok(png) => {
            job.status = JobStatus::Done;
            job.result = Some(png);
        }
        Err(e) => {
            job.status = JobStatus::Failed;
            job.error = Some(e);
        }
    }
}

fn worker_loop(shared: &Shared) {
    loop {
        let (id, params, content, style) = {
            let mut store = shared.store.lock().unwrap();
            let id = loop {
                if let Some(id) = store.queue.pop_front() {
                    break id;
                }
                if store.closing {
                    return;
                }
                store = shared.work.wait(store).unwrap();
            };
            let Some(job) = store.jobs.get_mut(&id) else { continue };
            job.status = JobStatus::Running;
            job.started_at = Some(Utc::now());
            shared.busy.fetch_add(1, Ordering::SeqCst);
            let (content, style) = job.inputs.take().expect("queued job keeps its inputs");
            (id, job.params.clone(), content, style)
        };
        tracing::debug!(job = %id, model = params.model().name(), "running");
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            shared.engine.run(&params, &content, style.as_ref()).and_then(|out| out.png())
        }))
        .unwrap_or_else(|_| Err(EngineError::InvalidParams("worker panicked".into())))
        .map_err(|e| e.to_string());
        {
            let mut store = shared.store.lock().unwrap();
            if let Some(job) = store.jobs.get_mut(&id) {
                finish(job, outcome);
            }
            shared.busy.fetch_sub(1, Ordering::SeqCst);
        }
        shared.finished.notify_waiters();
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn engine_error(e: EngineError) -> Response {
    match e {
        EngineError::UnknownModel => error(StatusCode::NOT_FOUND, "unknown model"),
        EngineError::Core(_) | EngineError::Checkpoint(_) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        e => error(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

#[derive(Deserialize)]
struct SubmitQuery {
    #[serde(default)]
    sync: bool,
}

async fn submit(State(svc): State<JobService>, Query(q): Query<SubmitQuery>, headers: HeaderMap, mut form: Multipart) -> Response {
    let limit = svc.config().max_upload_bytes;
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok());
    if declared.is_some_and(|n| n > limit) {
        return error(StatusCode::PAYLOAD_TOO_LARGE, format!("upload exceeds {limit} bytes"));
    }

    let mut content: Option<Bytes> = None;
    let mut style: Option<Bytes> = None;
    let mut model: Option<String> = None;
    let mut params = Value::Null;
    loop {
        let field = match form.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return error(e.status(), e.body_text()),
        };
        let name = field.name().unwrap_or_default().to_string();
        let bytes = match field.bytes().await {
            Ok(b) => b,
            Err(e) => return error(e.status(), e.body_text()),
        };
        match name.as_str() {
            "content" => content = Some(bytes),
            "style" => style = Some(bytes),
            "model" => model = Some(String::from_utf8_lossy(&bytes).trim().to_string()),
            "params" => match serde_json::from_slice(&bytes) {
                Ok(v) => params = v,
                Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid params: {e}")),
            },
            _ => {}
        }
    }

    let Some(model) = model else {
        return error(StatusCode::BAD_REQUEST, "invalid params: missing model field");
    };
    let Some(kind) = svc.model(&model) else {
        return error(StatusCode::NOT_FOUND, "unknown model");
    };
    let Some(content) = content else {
        return error(StatusCode::BAD_REQUEST, "invalid image: missing content field");
    };
    let svc2 = svc.clone();
    let submitted =
        tokio::task::spawn_blocking(move || svc2.submit(kind, &params, &content, style.as_deref())).await;
    let id = match submitted {
        Ok(Ok(id)) => id,
        Ok(Err(e)) => return engine_error(e),
        Err(_) => return error(StatusCode::INTERNAL_SERVER_ERROR, "submission failed"),
    };
    if !q.sync {
        return (StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response();
    }
    match svc.wait(&id).await {
        Lookup::Found(view) if view.status == JobStatus::Done => match svc.result(&id) {
            Lookup::Found(Some(png)) => png_response(png),
            _ => error(StatusCode::GONE, "result expired"),
        },
        Lookup::Found(view) => error(
            StatusCode::UNPROCESSABLE_ENTITY,
            view.error.unwrap_or_else(|| "job failed".into()),
        ),
        _ => error(StatusCode::GONE, "job expired"),
    }
}

fn png_response(png: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], png).into_response()
}

async fn job_status(State(svc): State<JobService>, Path(id): Path<String>) -> Response {
    match svc.job(&id) {
        Lookup::Found(view) => Json(view).into_response(),
        Lookup::Unknown => error(StatusCode::NOT_FOUND, "unknown job"),
        Lookup::Expired => error(StatusCode::GONE, "job expired"),
    }
}

async fn job_result(State(svc): State<JobService>, Path(id): Path<String>) -> Response {
    match svc.result(&id) {
        Lookup::Found(Some(png)) => png_response(png),
        Lookup::Found(None) => error(StatusCode::CONFLICT, "job has no result"),
        Lookup::Unknown => error(StatusCode::NOT_FOUND, "unknown job"),
        Lookup::Expired => error(StatusCode::GONE, "job expired"),
    }
}

async fn models(State(svc): State<JobService>) -> Json<Vec<ModelEntry>> {
    Json(svc.models())
}

async fn health(State(svc): State<JobService>) -> Json<Health> {
    Json(svc.health())
}

pub fn router(svc: JobService) -> Router {
    let body_limit = svc.config().max_upload_bytes.saturating_add(64 * 1024);
    Router::new()
        .route("/api/v1/jobs", post(submit))
        .route("/api/v1/jobs/:id", get(job_status))
        .route("/api/v1/jobs/:id/result", get(job_result))
        .route("/api/v1/models", get(models))
        .route("/api/v1/health", get(health))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(svc)
}

/// Serves `svc` on `listener` until `shutdown` resolves, then drains the workers.
pub async fn serve(
    listener: tokio::net::TcpListener,
    svc: JobService,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(svc.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    tokio::task::spawn_blocking(move || svc.shutdown())
        .await
        .map_err(std::io::Error::other)
}
