//! The single path for model traffic.
//!
//! A [`Gateway`] runs in one of four modes. `Live` and `Record` go through a
//! [`Backend`] (normally [`HttpBackend`]); `Record` also appends each answer
//! to a [`Cassette`]. `Replay` answers only from a cassette and has no backend
//! at all. `Mock` answers from a [`MockBackend`] script.

mod cassette;
mod digest;
mod http;
mod limiter;
mod schema;
mod structured;
mod types;

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::clock::Clock;

pub use cassette::{write_atomic, Cassette, CassetteEntry, RecordedRequest};
pub use digest::{canonical_json, request_key, sha256_hex};
pub use http::{HttpBackend, ProviderEndpoint};
pub use limiter::{RateLimiter, Semaphore};
pub use schema::{example_for, Schema, SchemaViolation};
pub use structured::{extract_json, Structured, StructuredError};
pub use types::{ChatRequest, ChatResponse, Message, Role, Usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Live,
    Record,
    Replay,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("provider returned status {status}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    /// Scripted failure that must not be retried.
    #[error("{0}")]
    Fatal(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            BackendError::Transport(_) | BackendError::Timeout => true,
            BackendError::Fatal(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("no recorded response for request {0}")]
    ReplayMiss(String),
    #[error("provider error {status}")]
    Provider { status: u16, body: String },
    #[error("model request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cassette write failed: {0}")]
    Cassette(String),
}

impl GatewayError {
    /// Short description safe to show to users: no response bodies, URLs
    /// or transport details.
    pub fn summary(&self) -> String {
        match self {
            GatewayError::ReplayMiss(_) => "no recorded response for this request".into(),
            GatewayError::Provider { status, .. } => format!("provider returned status {status}"),
            GatewayError::Timeout => "model request timed out".into(),
            GatewayError::Transport(_) => "could not reach the model provider".into(),
            GatewayError::InvalidRequest(m) => format!("invalid request: {m}"),
            GatewayError::Cassette(_) => "could not write the cassette".into(),
        }
    }
}

/// Something that can answer a chat request.
pub trait Backend: Send + Sync {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;

    fn uses_network(&self) -> bool {
        true
    }
}

type Responder = Box<dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync>;

enum Script {
    Queue(Mutex<VecDeque<Result<String, BackendError>>>),
    Responder(Responder),
}

/// Scripted test backend. Records every request it receives.
pub struct MockBackend {
    script: Script,
    received: Mutex<Vec<ChatRequest>>,
}

impl MockBackend {
    /// Answers requests with `replies` in order; fails once they run out.
    pub fn queue<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        MockBackend::with_script(Script::Queue(Mutex::new(
            replies.into_iter().map(|s| Ok(s.into())).collect(),
        )))
    }

    pub fn queue_results(replies: Vec<Result<String, BackendError>>) -> Self {
        MockBackend::with_script(Script::Queue(Mutex::new(replies.into())))
    }

    pub fn responder<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        MockBackend::with_script(Script::Responder(Box::new(f)))
    }

    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        MockBackend::responder(move |_| Ok(text.clone()))
    }

    /// Plain requests get `text`; schema-constrained requests get the
    /// smallest value satisfying their schema.
    pub fn placeholder(text: impl Into<String>) -> Self {
        let text = text.into();
        MockBackend::responder(move |req| match &req.response_schema {
            Some(schema) => Ok(example_for(schema).to_string()),
            None => Ok(text.clone()),
        })
    }

    fn with_script(script: Script) -> Self {
        MockBackend { script, received: Mutex::new(Vec::new()) }
    }

    pub fn received(&self) -> Vec<ChatRequest> {
        self.received.lock().unwrap().clone()
    }
}

impl Backend for MockBackend {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.received.lock().unwrap().push(req.clone());
        let text = match &self.script {
            Script::Queue(q) => q
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or_else(|| Err(BackendError::Fatal("mock script exhausted".into())))?,
            Script::Responder(f) => f(req)?,
        };
        Ok(ChatResponse::text(text))
    }

    fn uses_network(&self) -> bool {
        false
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).send(req)
    }

    fn uses_network(&self) -> bool {
        (**self).uses_network()
    }
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retries: u32,
    /// Backoff before retry `n` is `base * 2^(n-1)`.
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { retries: 3, base_backoff: Duration::from_millis(500) }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy { retries: 0, base_backoff: Duration::ZERO }
    }

    pub fn backoff(&self, retry: u32) -> Duration {
        self.base_backoff * 2u32.saturating_pow(retry.saturating_sub(1))
    }
}

#[derive(Debug, Clone)]
pub struct GatewayOptions {
    pub max_in_flight: usize,
    pub requests_per_minute: BTreeMap<String, u32>,
    pub retry: RetryPolicy,
    /// Stamps `recorded_at` on new cassette entries.
    pub clock: Clock,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        GatewayOptions {
            max_in_flight: 8,
            requests_per_minute: BTreeMap::new(),
            retry: RetryPolicy::default(),
            clock: Clock::System,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GatewayStats {
    pub calls: u64,
    pub network_calls: u64,
    pub replayed: u64,
    pub by_tag: BTreeMap<String, u64>,
}

impl GatewayStats {
    pub fn tagged(&self, tag: &str) -> u64 {
        self.by_tag.get(tag).copied().unwrap_or(0)
    }

    /// Calls whose tag starts with `prefix`.
    pub fn tagged_prefix(&self, prefix: &str) -> u64 {
        self.by_tag
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
            .sum()
    }
}

/// Shareable across threads; clone the `Arc` it usually lives in.
pub struct Gateway {
    mode: Mode,
    backend: Option<Arc<dyn Backend>>,
    cassette: Option<Arc<Cassette>>,
    in_flight: Semaphore,
    rate: RateLimiter,
    retry: RetryPolicy,
    clock: Clock,
    calls: AtomicU64,
    network_calls: AtomicU64,
    replayed: AtomicU64,
    by_tag: Mutex<BTreeMap<String, u64>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("mode", &self.mode).finish_non_exhaustive()
    }
}

impl Gateway {
    fn build(
        mode: Mode,
        backend: Option<Arc<dyn Backend>>,
        cassette: Option<Arc<Cassette>>,
        opts: GatewayOptions,
    ) -> Self {
        Gateway {
            mode,
            backend,
            cassette,
            in_flight: Semaphore::new(opts.max_in_flight),
            rate: RateLimiter::new(opts.requests_per_minute),
            retry: opts.retry,
            clock: opts.clock,
            calls: AtomicU64::new(0),
            network_calls: AtomicU64::new(0),
            replayed: AtomicU64::new(0),
            by_tag: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn live(backend: Arc<dyn Backend>, opts: GatewayOptions) -> Self {
        Gateway::build(Mode::Live, Some(backend), None, opts)
    }

    pub fn record(backend: Arc<dyn Backend>, cassette: Arc<Cassette>, opts: GatewayOptions) -> Self {
        Gateway::build(Mode::Record, Some(backend), Some(cassette), opts)
    }

    pub fn replay(cassette: Arc<Cassette>) -> Self {
        Gateway::build(Mode::Replay, None, Some(cassette), GatewayOptions::default())
    }

    pub fn mock(backend: Arc<MockBackend>) -> Self {
        let opts = GatewayOptions { retry: RetryPolicy::none(), ..GatewayOptions::default() };
        Gateway::build(Mode::Mock, Some(backend), None, opts)
    }

    pub fn mock_with(backend: Arc<dyn Backend>, opts: GatewayOptions) -> Self {
        Gateway::build(Mode::Mock, Some(backend), None, opts)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn cassette(&self) -> Option<&Arc<Cassette>> {
        self.cassette.as_ref()
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            calls: self.calls.load(Ordering::SeqCst),
            network_calls: self.network_calls.load(Ordering::SeqCst),
            replayed: self.replayed.load(Ordering::SeqCst),
            by_tag: self.by_tag.lock().unwrap().clone(),
        }
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.check().map_err(GatewayError::InvalidRequest)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(tag) = &req.tag {
            *self.by_tag.lock().unwrap().entry(tag.clone()).or_default() += 1;
        }

        let key = request_key(req);
        if self.mode == Mode::Replay {
            let cassette = self.cassette.as_ref().expect("replay gateways hold a cassette");
            return match cassette.get(&key) {
                Some(entry) => {
                    self.replayed.fetch_add(1, Ordering::SeqCst);
                    Ok(entry.response)
                }
                None => Err(GatewayError::ReplayMiss(key)),
            };
        }

        let backend = self.backend.as_ref().expect("non-replay gateways hold a backend");
        let response = self.send_with_retry(backend.as_ref(), req)?;
        if self.mode == Mode::Record {
            let entry = CassetteEntry {
                key,
                request: req.into(),
                response: response.clone(),
                recorded_at: self.clock.now(),
            };
            self.cassette
                .as_ref()
                .expect("record gateways hold a cassette")
                .insert(entry)
                .map_err(|e| GatewayError::Cassette(e.to_string()))?;
        }
        Ok(response)
    }

    fn send_with_retry(&self, backend: &dyn Backend, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let mut attempt = 0;
        loop {
            let result = {
                let _permit = self.in_flight.acquire();
                if backend.uses_network() {
                    self.rate.wait(&req.provider);
                    self.network_calls.fetch_add(1, Ordering::SeqCst);
                }
                let started = Instant::now();
                backend.send(req).map(|mut r| {
                    if r.latency_ms == 0 && backend.uses_network() {
                        r.latency_ms = started.elapsed().as_millis() as u64;
                    }
                    r
                })
            };
            match result {
                Ok(r) => return Ok(r),
                Err(e) if e.retryable() && attempt < self.retry.retries => {
                    attempt += 1;
                    log::warn!("model request failed ({e}); retry {attempt}/{}", self.retry.retries);
                    thread::sleep(self.retry.backoff(attempt));
                }
                Err(BackendError::Status { status, body }) => {
                    return Err(GatewayError::Provider { status, body })
                }
                Err(BackendError::Timeout) => return Err(GatewayError::Timeout),
                Err(BackendError::Transport(m)) | Err(BackendError::Fatal(m)) => {
                    return Err(GatewayError::Transport(m))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("p", "m", vec![Message::user(text)])
    }

    #[test]
    fn mock_echo() {
        let g = Gateway::mock(Arc::new(MockBackend::responder(|r| Ok(r.messages[0].content.clone()))));
        assert_eq!(g.complete(&req("ping")).unwrap().text, "ping");
        assert_eq!(g.stats().network_calls, 0);
    }

    #[test]
    fn record_then_replay_matches() {
        let cassette = Arc::new(Cassette::in_memory());
        let rec = Gateway::record(
            Arc::new(MockBackend::constant("recorded answer")),
            cassette.clone(),
            GatewayOptions::default(),
        );
        let recorded = rec.complete(&req("q")).unwrap();

        let replay = Gateway::replay(cassette);
        let a = replay.complete(&req("q")).unwrap();
        let b = replay.complete(&req("q")).unwrap();
        assert_eq!(a, recorded);
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert_eq!(replay.stats().network_calls, 0);
        assert_eq!(replay.stats().replayed, 2);
    }

    #[test]
    fn replay_miss_reports_key() {
        let g = Gateway::replay(Arc::new(Cassette::in_memory()));
        let r = req("unknown");
        assert_eq!(g.complete(&r), Err(GatewayError::ReplayMiss(request_key(&r))));
    }

    struct Flaky {
        failures: AtomicU64,
        status: u16,
        sent: AtomicU64,
    }

    impl Backend for Flaky {
        fn send(&self, _: &ChatRequest) -> Result<ChatResponse, BackendError> {
            self.sent.fetch_add(1, Ordering::SeqCst);
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(BackendError::Status { status: self.status, body: "secret".into() });
            }
            Ok(ChatResponse::text("ok"))
        }
    }

    fn fast_opts() -> GatewayOptions {
        GatewayOptions {
            retry: RetryPolicy { retries: 3, base_backoff: Duration::from_millis(1) },
            ..GatewayOptions::default()
        }
    }

    #[test]
    fn retries_transient_errors_within_budget() {
        let backend = Arc::new(Flaky { failures: AtomicU64::new(3), status: 503, sent: AtomicU64::new(0) });
        let g = Gateway::live(backend.clone(), fast_opts());
        assert_eq!(g.complete(&req("x")).unwrap().text, "ok");
        assert_eq!(backend.sent.load(Ordering::SeqCst), 4);
        assert_eq!(g.stats().network_calls, 4);

        let backend = Arc::new(Flaky { failures: AtomicU64::new(10), status: 500, sent: AtomicU64::new(0) });
        let g = Gateway::live(backend.clone(), fast_opts());
        assert!(matches!(g.complete(&req("x")), Err(GatewayError::Provider { status: 500, .. })));
        assert_eq!(backend.sent.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let backend = Arc::new(Flaky { failures: AtomicU64::new(1), status: 400, sent: AtomicU64::new(0) });
        let g = Gateway::live(backend.clone(), fast_opts());
        assert!(matches!(g.complete(&req("x")), Err(GatewayError::Provider { status: 400, .. })));
        assert_eq!(backend.sent.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn default_backoff_schedule() {
        let p = RetryPolicy::default();
        let ms: Vec<u128> = (1..=3).map(|n| p.backoff(n).as_millis()).collect();
        assert_eq!(ms, vec![500, 1000, 2000]);
    }

    #[test]
    fn rejects_malformed_requests() {
        let g = Gateway::mock(Arc::new(MockBackend::constant("x")));
        let empty = ChatRequest::new("p", "m", vec![]);
        assert!(matches!(g.complete(&empty), Err(GatewayError::InvalidRequest(_))));
        let late_system = ChatRequest::new("p", "m", vec![Message::user("a"), Message::system("b")]);
        assert!(g.complete(&late_system).is_err());
    }

    #[test]
    fn tags_are_counted() {
        let g = Gateway::mock(Arc::new(MockBackend::constant("x")));
        g.complete(&req("a").with_tag("planner")).unwrap();
        g.complete(&req("b").with_tag("nodegen.Prompt")).unwrap();
        g.complete(&req("c").with_tag("nodegen.TextFields")).unwrap();
        let s = g.stats();
        assert_eq!(s.tagged("planner"), 1);
        assert_eq!(s.tagged_prefix("nodegen."), 2);
        assert_eq!(s.tagged("review"), 0);
    }
}
