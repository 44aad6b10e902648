#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use flowsmith::api::{router, AppState};
use flowsmith::engine::{resolve_config, Engine, GatewayMode};
use flowsmith::jobs::Shared;
use flowsmith::workspace::Workspace;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn replay_engine(name: &str) -> Engine {
    let mode = GatewayMode::Replay(fixtures().join(name));
    let cfg = resolve_config(None, &mode).unwrap();
    Engine::open(mode, cfg).unwrap()
}

pub struct App {
    pub router: Router,
    pub shared: Arc<Shared>,
}

pub fn app(root: &Path, engine: Engine) -> App {
    let shared = Arc::new(Shared::new(Workspace::open(root).unwrap(), engine));
    App { router: router(AppState::new(shared.clone()), None), shared }
}

impl App {
    pub async fn send(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let body = body.map(|b| b.to_string()).unwrap_or_default();
        self.send_raw(method, uri, body.into_bytes()).await
    }

    pub async fn send_raw(&self, method: Method, uri: &str, body: Vec<u8>) -> (StatusCode, Value) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(Body::from(body))
            .unwrap();
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        (status, value)
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.send(Method::GET, uri, None).await
    }

    /// Polls `uri` until `done` holds for the body.
    pub async fn poll(&self, uri: &str, done: impl Fn(&Value) -> bool) -> Value {
        let deadline = Instant::now() + Duration::from_secs(20);
        loop {
            let (status, body) = self.get(uri).await;
            assert_eq!(status, StatusCode::OK, "{uri}: {body}");
            if done(&body) {
                return body;
            }
            assert!(Instant::now() < deadline, "{uri} did not settle: {body}");
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }
}

pub fn job_finished(v: &Value) -> bool {
    matches!(v["phase"].as_str(), Some("done" | "failed"))
}

pub fn run_finished(v: &Value) -> bool {
    v["status"]["state"] != "running"
}
