mod common;

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Stdio};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use common::*;
use serde_json::{json, Value};
use smokeforge::corpus::read_jsonl;
use smokeforge::filter::{ScoreRecord, Scorer};
use smokeforge_cli::server::{conflicts_path, router, AnnotationStore, Descriptor, Progress};
use tower::ServiceExt;

fn app(dir: &Path) -> (Router, Arc<AnnotationStore>) {
    let (path, m) = masked_set(dir, 5, 12, 10);
    let store = Arc::new(
        AnnotationStore::open(&m, path.parent().unwrap(), &dir.join("annotations.jsonl")).unwrap(),
    );
    (router(store.clone(), None), store)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX)
        .await
        .unwrap();
    (status, bytes.to_vec())
}

async fn call_json(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn score(id: &str, c: f64, v: f64, t: f64) -> Value {
    json!({ "id": id, "color": c, "visibility": v, "translucency": t })
}

#[tokio::test]
async fn valid_score_is_persisted_and_acknowledged() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let (status, body) = call_json(
        &app,
        "POST",
        "/api/score",
        Some(score("s01", 8.0, 6.0, 4.0)),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["weighted"], 6.6);

    let saved: Vec<ScoreRecord> = read_jsonl(&dir.path().join("annotations.jsonl")).unwrap();
    assert_eq!(saved.len(), 1);
    assert_eq!(
        saved[0],
        ScoreRecord::new("s01", 8.0, 6.0, 4.0, Scorer::Human).unwrap()
    );
}

#[tokio::test]
async fn invalid_scores_get_field_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (app, store) = app(dir.path());
    let (status, body) = call_json(
        &app,
        "POST",
        "/api/score",
        Some(score("s01", 11.0, 5.0, -0.5)),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let errors = body["errors"].as_object().unwrap();
    assert!(errors.contains_key("color") && errors.contains_key("translucency"));
    assert!(!errors.contains_key("visibility"));

    let (status, body) = call_json(
        &app,
        "POST",
        "/api/score",
        Some(json!({ "id": "s01", "color": "high" })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["errors"]["color"], "must be a number");
    assert_eq!(body["errors"]["visibility"], "required");

    let (status, _) = call(&app, "POST", "/api/score", Some(json!([1, 2]))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, _) = call_json(
        &app,
        "POST",
        "/api/score",
        Some(score("nope", 5.0, 5.0, 5.0)),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    assert_eq!(
        store.progress(),
        Progress {
            scored: 0,
            total: 5
        }
    );
    let text = fs::read_to_string(dir.path().join("annotations.jsonl")).unwrap();
    assert!(text.is_empty());
}

#[tokio::test]
async fn scoring_the_whole_queue_completes_progress() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let (_, q) = call(&app, "GET", "/api/queue?n=2", None).await;
    let q: Vec<Descriptor> = serde_json::from_slice(&q).unwrap();
    assert_eq!(
        q.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(),
        ["s00", "s01"]
    );
    assert_eq!(q[0].image_url, "/images/s00");
    assert_eq!(q[0].mask_url.as_deref(), Some("/masks/s00"));

    let mut n = 0;
    loop {
        let (_, q) = call(&app, "GET", "/api/queue?n=1", None).await;
        let q: Vec<Descriptor> = serde_json::from_slice(&q).unwrap();
        let Some(d) = q.first() else { break };
        if d.id == "s02" {
            assert!(d.mask_url.is_none());
        }
        let (s, _) = call(
            &app,
            "POST",
            "/api/score",
            Some(score(&d.id, 7.0, 7.0, 9.0)),
        )
        .await;
        assert_eq!(s, StatusCode::CREATED);
        n += 1;
    }
    assert_eq!(n, 5);
    let (_, p) = call_json(&app, "GET", "/api/progress", None).await;
    assert_eq!(p, json!({ "scored": 5, "total": 5 }));
}

#[tokio::test]
async fn images_and_masks_are_served() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let (s, bytes) = call(&app, "GET", "/images/s03", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(bytes, fs::read(dir.path().join("img/s03.png")).unwrap());
    let (s, bytes) = call(&app, "GET", "/masks/s03", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(bytes, fs::read(dir.path().join("mask/s03.png")).unwrap());
    assert_eq!(
        call(&app, "GET", "/masks/s02", None).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        call(&app, "GET", "/images/zz", None).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        call(&app, "GET", "/index.html", None).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn static_ui_is_confined_to_its_directory() {
    let dir = tempfile::tempdir().unwrap();
    let (path, m) = masked_set(dir.path(), 2, 8, 8);
    let ui = dir.path().join("ui");
    fs::create_dir_all(&ui).unwrap();
    fs::write(ui.join("index.html"), "<p>annotate</p>").unwrap();
    let store = Arc::new(
        AnnotationStore::open(&m, path.parent().unwrap(), &dir.path().join("a.jsonl")).unwrap(),
    );
    let app = router(store, Some(ui));
    let (s, body) = call(&app, "GET", "/", None).await;
    assert_eq!(
        (s, body.as_slice()),
        (StatusCode::OK, &b"<p>annotate</p>"[..])
    );
    assert_eq!(
        call(&app, "GET", "/../manifest.jsonl", None).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        call(&app, "GET", "/%2e%2e/manifest.jsonl", None).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn re_posting_overwrites_and_logs_the_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    call(
        &app,
        "POST",
        "/api/score",
        Some(score("s00", 2.0, 2.0, 2.0)),
    )
    .await;
    let (s, _) = call(
        &app,
        "POST",
        "/api/score",
        Some(score("s00", 9.0, 9.0, 9.0)),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    let (_, p) = call_json(&app, "GET", "/api/progress", None).await;
    assert_eq!(p["scored"], 1);

    let log = conflicts_path(&dir.path().join("annotations.jsonl"));
    assert!(log.ends_with("annotations.conflicts.jsonl"));
    let conflicts: Vec<Value> = read_jsonl(&log).unwrap();
    assert_eq!(conflicts.len(), 1);
    assert_eq!(conflicts[0]["previous"]["color"], 2.0);
    assert_eq!(conflicts[0]["current"]["color"], 9.0);

    // After a restart the latest score wins.
    let (_, store) = app_reopen(dir.path());
    assert_eq!(store.get("s00").unwrap().color, 9.0);
}

fn app_reopen(dir: &Path) -> (Router, Arc<AnnotationStore>) {
    let m = smokeforge::corpus::Manifest::read(&dir.join("manifest.jsonl")).unwrap();
    let store = Arc::new(AnnotationStore::open(&m, dir, &dir.join("annotations.jsonl")).unwrap());
    (router(store.clone(), None), store)
}

#[test]
fn torn_final_line_is_dropped_on_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (_, store) = app(dir.path());
    store
        .submit(ScoreRecord::new("s00", 1.0, 2.0, 3.0, Scorer::Human).unwrap())
        .unwrap();
    drop(store);
    let path = dir.path().join("annotations.jsonl");
    let mut f = fs::OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(b"{\"sample_id\":\"s01\",\"col").unwrap();
    drop(f);

    let (_, store) = app_reopen(dir.path());
    assert_eq!(store.progress().scored, 1);
    store
        .submit(ScoreRecord::new("s01", 4.0, 4.0, 4.0, Scorer::Human).unwrap())
        .unwrap();
    let saved: Vec<ScoreRecord> = read_jsonl(&path).unwrap();
    assert_eq!(
        saved
            .iter()
            .map(|r| r.sample_id.as_str())
            .collect::<Vec<_>>(),
        ["s00", "s01"]
    );
}

struct Server {
    child: Child,
    addr: String,
}

impl Server {
    fn start(dir: &Path) -> Self {
        let mut child = bin()
            .args([
                "annotate-serve",
                "--manifest",
                "manifest.jsonl",
                "--addr",
                "127.0.0.1:0",
            ])
            .current_dir(dir)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.as_mut().unwrap())
            .read_line(&mut line)
            .unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on http://")
            .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
            .to_string();
        Self { child, addr }
    }

    fn request(&self, method: &str, path: &str, body: &str) -> (u16, String) {
        let mut s = TcpStream::connect(&self.addr).unwrap();
        write!(
            s,
            "{method} {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
        let mut resp = String::new();
        s.read_to_string(&mut resp).unwrap();
        let status = resp.split_whitespace().nth(1).unwrap().parse().unwrap();
        let body = resp
            .split_once("\r\n\r\n")
            .map(|(_, b)| b.to_string())
            .unwrap_or_default();
        (status, body)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn acknowledged_score_survives_a_kill() {
    let dir = tempfile::tempdir().unwrap();
    masked_set(dir.path(), 3, 8, 8);
    let server = Server::start(dir.path());
    let (status, _) = server.request(
        "POST",
        "/api/score",
        &score("s02", 3.0, 4.0, 5.0).to_string(),
    );
    assert_eq!(status, 201);
    drop(server);

    let server = Server::start(dir.path());
    let (status, body) = server.request("GET", "/api/progress", "");
    assert_eq!(status, 200);
    let p: Progress = serde_json::from_str(&body).unwrap();
    assert_eq!(
        p,
        Progress {
            scored: 1,
            total: 3
        }
    );
    let (_, body) = server.request("GET", "/api/queue?n=5", "");
    let q: Vec<Descriptor> = serde_json::from_str(&body).unwrap();
    assert_eq!(q.len(), 2);
    assert!(q.iter().all(|d| d.id != "s02"));
}
