use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use quicktext::abtest::{assign_group, PredictionRecord, SelectionEvent};
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};

use crate::api::{ErrorBody, EventsAccepted, Health, PredictRequest, PredictResponse, DEFAULT_K};
use crate::backend::{Backend, BackendError, Scored};

pub const DEFAULT_QUEUE_DEPTH: usize = 1024;
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.02;
pub const DEFAULT_SALT: &str = "holdout-v1";

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub queue_depth: usize,
    pub holdout_fraction: f64,
    pub salt: String,
    /// NDJSON log of every prediction, shown or not.
    pub prediction_log: Option<PathBuf>,
    /// NDJSON log of ingested selection events.
    pub event_log: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            queue_depth: DEFAULT_QUEUE_DEPTH,
            holdout_fraction: DEFAULT_HOLDOUT_FRACTION,
            salt: DEFAULT_SALT.to_string(),
            prediction_log: None,
            event_log: None,
        }
    }
}

#[derive(Clone, Debug)]
struct ModelInfo {
    version: String,
    catalog_size: usize,
}

struct Job {
    req: PredictRequest,
    k: usize,
    reply: oneshot::Sender<(Result<Scored, BackendError>, f64)>,
}

type NdjsonLog = Mutex<BufWriter<File>>;

struct Inner {
    cfg: ServeConfig,
    info: OnceLock<ModelInfo>,
    load_error: OnceLock<String>,
    jobs: mpsc::Sender<Job>,
    predictions: Option<NdjsonLog>,
    events: Option<NdjsonLog>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

fn open_append(path: &PathBuf) -> std::io::Result<NdjsonLog> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let f = OpenOptions::new().create(true).append(true).open(path)?;
    Ok(Mutex::new(BufWriter::new(f)))
}

fn append_lines<T: Serialize>(log: &NdjsonLog, items: &[T]) -> std::io::Result<()> {
    let mut w = log.lock().unwrap_or_else(|p| p.into_inner());
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

impl AppState {
    /// Starts the inference worker thread. `loader` runs on that thread;
    /// the service reports ready once it returns a backend.
    pub fn start<L>(cfg: ServeConfig, loader: L) -> std::io::Result<Self>
    where
        L: FnOnce() -> Result<Box<dyn Backend>, BackendError> + Send + 'static,
    {
        let (tx, mut rx) = mpsc::channel::<Job>(cfg.queue_depth.max(1));
        let inner = Arc::new(Inner {
            predictions: cfg.prediction_log.as_ref().map(open_append).transpose()?,
            events: cfg.event_log.as_ref().map(open_append).transpose()?,
            cfg,
            info: OnceLock::new(),
            load_error: OnceLock::new(),
            jobs: tx,
        });
        let worker = inner.clone();
        std::thread::Builder::new()
            .name("inference".into())
            .spawn(move || {
                let mut backend = match loader() {
                    Ok(b) => b,
                    Err(e) => {
                        log::error!("model load failed: {e}");
                        let _ = worker.load_error.set(e.to_string());
                        return;
                    }
                };
                let _ = worker.info.set(ModelInfo {
                    version: backend.model_version(),
                    catalog_size: backend.catalog_size(),
                });
                drop(worker);
                while let Some(job) = rx.blocking_recv() {
                    let t0 = Instant::now();
                    let out = backend.predict(&job.req, job.k);
                    let _ = job.reply.send((out, t0.elapsed().as_secs_f64() * 1e3));
                }
            })?;
        Ok(Self(inner))
    }

    pub fn is_ready(&self) -> bool {
        self.0.info.get().is_some()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/predict", post(predict))
        .route("/v1/events", post(events))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Binds `addr` and serves on a background task. Returns the bound address.
pub async fn spawn(addr: SocketAddr, state: AppState) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = serve(listener, state).await {
            log::error!("server stopped: {e}");
        }
    });
    Ok(bound)
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

async fn health(State(s): State<AppState>) -> Response {
    match s.0.info.get() {
        Some(info) => Json(Health {
            status: "ok".into(),
            model_version: Some(info.version.clone()),
            catalog_size: Some(info.catalog_size),
        })
        .into_response(),
        None => {
            let status = if s.0.load_error.get().is_some() { "failed" } else { "loading" };
            (
                StatusCode::SERVICE_UNAVAILABLE,
                Json(Health {
                    status: status.into(),
                    model_version: None,
                    catalog_size: None,
                }),
            )
                .into_response()
        }
    }
}

async fn predict(State(s): State<AppState>, body: Bytes) -> Response {
    let t0 = Instant::now();
    let Some(info) = s.0.info.get() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "model not loaded");
    };
    let req: PredictRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid request: {e}")),
    };
    if req.messages.is_empty() {
        return error(StatusCode::BAD_REQUEST, "messages must not be empty");
    }
    let k = req.k.unwrap_or(DEFAULT_K);
    if k == 0 || k > info.catalog_size {
        return error(
            StatusCode::BAD_REQUEST,
            format!("k must be in 1..={}, got {k}", info.catalog_size),
        );
    }
    let (reply, rx) = oneshot::channel();
    let case_id = req.case_id.clone();
    match s.0.jobs.try_send(Job { req, k, reply }) {
        Ok(()) => {}
        Err(mpsc::error::TrySendError::Full(_)) => {
            return error(StatusCode::TOO_MANY_REQUESTS, "inference queue full")
        }
        Err(mpsc::error::TrySendError::Closed(_)) => {
            return error(StatusCode::SERVICE_UNAVAILABLE, "inference worker stopped")
        }
    }
    let (scored, model_ms) = match rx.await {
        Ok((Ok(scored), ms)) => (scored, ms),
        Ok((Err(BackendError::BadRequest(m)), _)) => return error(StatusCode::BAD_REQUEST, m),
        Ok((Err(e), _)) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(_) => return error(StatusCode::SERVICE_UNAVAILABLE, "inference worker stopped"),
    };
    let group = assign_group(&case_id, s.0.cfg.holdout_fraction, &s.0.cfg.salt);
    if let Some(log) = &s.0.predictions {
        let rec = PredictionRecord {
            case_id: case_id.clone(),
            timestamp: Utc::now(),
            group,
            template_ids: scored.template_ids.clone(),
            probabilities: scored.probabilities.clone(),
            model_version: info.version.clone(),
        };
        if let Err(e) = append_lines(log, &[rec]) {
            log::warn!("prediction log write failed: {e}");
        }
    }
    Json(PredictResponse {
        case_id,
        template_ids: scored.template_ids,
        probabilities: scored.probabilities,
        model_version: info.version.clone(),
        group,
        latency_ms: t0.elapsed().as_secs_f64() * 1e3,
        model_ms,
    })
    .into_response()
}

/// Parses and validates an NDJSON batch; nothing is logged unless every
/// line is valid.
pub fn parse_events(body: &str) -> Result<Vec<SelectionEvent>, String> {
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: SelectionEvent = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        e.validate().map_err(|e| format!("line {}: {e}", i + 1))?;
        out.push(e);
    }
    Ok(out)
}

async fn events(State(s): State<AppState>, body: Bytes) -> Response {
    let Ok(text) = std::str::from_utf8(&body) else {
        return error(StatusCode::BAD_REQUEST, "body is not UTF-8");
    };
    let events = match parse_events(text) {
        Ok(ev) => ev,
        Err(m) => return error(StatusCode::BAD_REQUEST, m),
    };
    if let Some(log) = &s.0.events {
        if let Err(e) = append_lines(log, &events) {
            return error(StatusCode::INTERNAL_SERVER_ERROR, format!("event log write failed: {e}"));
        }
    }
    Json(EventsAccepted { accepted: events.len() }).into_response()
}
