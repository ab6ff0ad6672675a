//! Human annotation API.
//!
//! Scores are appended to a JSONL file and synced before the request is
//! acknowledged; all writes go through one lock. Restarting the service
//! replays the file, the last record for an id winning.

use std::collections::HashMap;
use std::future::Future;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use smokeforge::corpus::{resolve, write_atomic, JsonlAppender, Manifest, SmokeSample};
use smokeforge::filter::{ScoreRecord, Scorer, SCORE_MAX};
use smokeforge::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub id: String,
    pub image_url: String,
    pub mask_url: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub scored: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub id: String,
    pub previous: ScoreRecord,
    pub current: ScoreRecord,
    /// Unix seconds.
    pub at: u64,
}

struct Log {
    scored: HashMap<String, ScoreRecord>,
    out: JsonlAppender,
    conflicts: JsonlAppender,
}

pub struct AnnotationStore {
    samples: Vec<SmokeSample>,
    index: HashMap<String, usize>,
    base: PathBuf,
    log: Mutex<Log>,
}

/// Conflict log path for an annotations file: `x.jsonl` → `x.conflicts.jsonl`.
pub fn conflicts_path(annotations: &Path) -> PathBuf {
    let stem = annotations
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    annotations.with_file_name(format!("{stem}.conflicts.jsonl"))
}

/// Reads saved annotations. A torn final line, left by a crash before the
/// write was acknowledged, is dropped and the file rewritten without it.
fn replay(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => {
            return Err(Error::Io {
                path: path.into(),
                source: e,
            })
        }
    };
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => {
                log::warn!("dropping torn final line of {}", path.display());
                let keep = &text[..text.len() - line.len()];
                write_atomic(path, keep.as_bytes())?;
            }
            Err(e) => {
                return Err(Error::InvalidInput(format!(
                    "{}:{}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Percent-encodes everything outside the URL unreserved set.
fn encode(id: &str) -> String {
    let mut s = String::with_capacity(id.len());
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            s.push(b as char);
        } else {
            s.push_str(&format!("%{b:02X}"));
        }
    }
    s
}

impl AnnotationStore {
    /// `base` resolves relative manifest paths.
    pub fn open(manifest: &Manifest, base: &Path, annotations: &Path) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, s) in manifest.records.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate id {} in manifest",
                    s.id
                )));
            }
        }
        let mut scored = HashMap::new();
        for r in replay(annotations)? {
            if !index.contains_key(&r.sample_id) {
                log::warn!("annotation for unknown id {} ignored", r.sample_id);
                continue;
            }
            scored.insert(r.sample_id.clone(), r);
        }
        Ok(Self {
            samples: manifest.records.clone(),
            index,
            base: base.to_path_buf(),
            log: Mutex::new(Log {
                scored,
                out: JsonlAppender::open(annotations)?,
                conflicts: JsonlAppender::open(&conflicts_path(annotations))?,
            }),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Log> {
        self.log.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn progress(&self) -> Progress {
        Progress {
            scored: self.lock().scored.len(),
            total: self.samples.len(),
        }
    }

    /// The first `n` unscored samples in manifest order.
    pub fn queue(&self, n: usize) -> Vec<Descriptor> {
        let log = self.lock();
        self.samples
            .iter()
            .filter(|s| !log.scored.contains_key(&s.id))
            .take(n)
            .map(|s| Descriptor {
                id: s.id.clone(),
                image_url: format!("/images/{}", encode(&s.id)),
                mask_url: s
                    .mask_path
                    .as_ref()
                    .map(|_| format!("/masks/{}", encode(&s.id))),
            })
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<ScoreRecord> {
        self.lock().scored.get(id).cloned()
    }

    pub fn sample(&self, id: &str) -> Option<&SmokeSample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    /// Persists a human score. Returns the record it replaced, if any.
    pub fn submit(&self, record: ScoreRecord) -> Result<Option<ScoreRecord>> {
        if !self.index.contains_key(&record.sample_id) {
            return Err(Error::InvalidInput(format!(
                "unknown sample id {}",
                record.sample_id
            )));
        }
        let mut log = self.lock();
        log.out.append(&record)?;
        let previous = log.scored.insert(record.sample_id.clone(), record.clone());
        if let Some(prev) = &previous {
            log::warn!("re-scored {}: replacing {prev:?}", record.sample_id);
            let c = Conflict {
                id: record.sample_id.clone(),
                previous: prev.clone(),
                current: record,
                at: now(),
            };
            log.conflicts.append(&c)?;
        }
        Ok(previous)
    }
}

struct AppState {
    store: Arc<AnnotationStore>,
    ui_dir: Option<PathBuf>,
}

type Shared = State<Arc<AppState>>;

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

pub fn router(store: Arc<AnnotationStore>, ui_dir: Option<PathBuf>) -> Router {
    let state = Arc::new(AppState { store, ui_dir });
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/score", post(score))
        .route("/api/progress", get(progress))
        .route("/images/{id}", get(image))
        .route("/masks/{id}", get(mask))
        .fallback(get(static_file))
        .with_state(state)
}

pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
}

#[derive(Deserialize)]
struct QueueParams {
    n: Option<usize>,
}

const DEFAULT_QUEUE: usize = 10;

async fn queue(State(app): Shared, Query(q): Query<QueueParams>) -> Json<Vec<Descriptor>> {
    Json(app.store.queue(q.n.unwrap_or(DEFAULT_QUEUE)))
}

async fn progress(State(app): Shared) -> Json<Progress> {
    Json(app.store.progress())
}

const FIELDS: [&str; 3] = ["color", "visibility", "translucency"];

/// Field-level checks for a score body; the map is empty when it is valid.
fn check_body(body: &Value) -> (Option<String>, [f64; 3], Map<String, Value>) {
    let mut errors = Map::new();
    let Some(obj) = body.as_object() else {
        errors.insert("body".into(), "expected a JSON object".into());
        return (None, [0.0; 3], errors);
    };
    let id = match obj.get("id") {
        Some(Value::String(s)) if !s.is_empty() => Some(s.clone()),
        Some(_) => {
            errors.insert("id".into(), "must be a non-empty string".into());
            None
        }
        None => {
            errors.insert("id".into(), "required".into());
            None
        }
    };
    let mut scores = [0.0; 3];
    for (slot, name) in scores.iter_mut().zip(FIELDS) {
        match obj.get(name).and_then(Value::as_f64) {
            Some(v) if (0.0..=SCORE_MAX).contains(&v) => *slot = v,
            Some(_) => {
                errors.insert(
                    name.into(),
                    format!("must be between 0 and {SCORE_MAX}").into(),
                );
            }
            None if obj.contains_key(name) => {
                errors.insert(name.into(), "must be a number".into());
            }
            None => {
                errors.insert(name.into(), "required".into());
            }
        }
    }
    (id, scores, errors)
}

async fn score(State(app): Shared, body: Bytes) -> Response {
    let body: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed JSON: {e}")),
    };
    let (id, [c, v, t], errors) = check_body(&body);
    if !errors.is_empty() {
        return (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(json!({ "errors": errors })),
        )
            .into_response();
    }
    let id = id.expect("validated");
    if app.store.sample(&id).is_none() {
        return error(StatusCode::NOT_FOUND, format!("unknown sample id {id}"));
    }
    let record = match ScoreRecord::new(id, c, v, t, Scorer::Human) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    let store = app.store.clone();
    let saved = record.clone();
    match tokio::task::spawn_blocking(move || store.submit(saved)).await {
        Ok(Ok(_)) => (StatusCode::CREATED, Json(record)).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

fn content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn send_file(path: &Path) -> Response {
    match tokio::fs::read(path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(path))], bytes).into_response(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            error(StatusCode::NOT_FOUND, "file not found")
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn image(State(app): Shared, UrlPath(id): UrlPath<String>) -> Response {
    match app.store.sample(&id) {
        Some(s) => send_file(&resolve(&app.store.base, &s.image_path)).await,
        None => error(StatusCode::NOT_FOUND, format!("unknown sample id {id}")),
    }
}

async fn mask(State(app): Shared, UrlPath(id): UrlPath<String>) -> Response {
    match app.store.sample(&id) {
        Some(s) => match &s.mask_path {
            Some(m) => send_file(&resolve(&app.store.base, m)).await,
            None => error(StatusCode::NOT_FOUND, format!("{id} has no mask")),
        },
        None => error(StatusCode::NOT_FOUND, format!("unknown sample id {id}")),
    }
}

async fn static_file(State(app): Shared, uri: Uri) -> Response {
    let Some(dir) = &app.ui_dir else {
        return error(StatusCode::NOT_FOUND, "not found");
    };
    let rel = Path::new(uri.path().trim_start_matches('/'));
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return error(StatusCode::NOT_FOUND, "not found");
    }
    let path = if rel.as_os_str().is_empty() {
        dir.join("index.html")
    } else {
        dir.join(rel)
    };
    send_file(&path).await
}
