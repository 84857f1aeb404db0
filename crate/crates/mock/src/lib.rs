//! A local OpenAI-compatible chat-completions server with scriptable
//! failures, latency and reply noise.
//!
//! Every random decision is drawn from a generator seeded by the script
//! seed, the request content and how many times that exact content has been
//! seen before. Outcomes therefore replay identically for the same seed and
//! request sequence, regardless of how concurrent requests interleave.

use std::collections::HashMap;
use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use litextract_core::schema::schema_block_fields;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

#[derive(Debug, Error)]
pub enum MockError {
    #[error("invalid latency {0:?}; use a number of milliseconds or a range like 10-50")]
    Latency(String),
    #[error("unknown noise mode {0:?}")]
    Noise(String),
    #[error("failure rate must be within [0, 1], got {0}")]
    FailureRate(f64),
    #[error("cannot bind mock server: {0}")]
    Bind(#[from] std::io::Error),
}

/// Per-request delay before answering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Latency {
    Fixed(u64),
    Uniform { min: u64, max: u64 },
}

impl Default for Latency {
    fn default() -> Self {
        Latency::Fixed(0)
    }
}

impl FromStr for Latency {
    type Err = MockError;

    /// Accepts `30`, `10-50` or `10..50` (milliseconds).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MockError::Latency(s.to_string());
        let t = s.trim();
        let range = t.split_once("..").or_else(|| t.split_once('-'));
        match range {
            Some((a, b)) => {
                let min: u64 = a.trim().parse().map_err(|_| bad())?;
                let max: u64 = b.trim().parse().map_err(|_| bad())?;
                if min > max {
                    return Err(bad());
                }
                Ok(Latency::Uniform { min, max })
            }
            None => t.parse().map(Latency::Fixed).map_err(|_| bad()),
        }
    }
}

/// How the JSON reply is dressed up before being returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Clean,
    PrefixSuffix,
    CodeFence,
    DoubleObject,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 4] = [
        NoiseMode::Clean,
        NoiseMode::PrefixSuffix,
        NoiseMode::CodeFence,
        NoiseMode::DoubleObject,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::Clean => "clean",
            NoiseMode::PrefixSuffix => "prefix_suffix",
            NoiseMode::CodeFence => "code_fence",
            NoiseMode::DoubleObject => "double_object",
        }
    }

    /// Wraps a JSON object text.
    pub fn apply(self, json: &str) -> String {
        match self {
            NoiseMode::Clean => json.to_string(),
            NoiseMode::PrefixSuffix => format!("Result: {json} Done."),
            NoiseMode::CodeFence => format!("```json\n{json}\n```"),
            NoiseMode::DoubleObject => {
                format!("{json}\nAlternative: {{\"note\": \"second candidate\", \"confidence\": 0.5}}")
            }
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseMode {
    type Err = MockError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        NoiseMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| MockError::Noise(s.to_string()))
    }
}

/// The prompts of one chat-completions request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockRequest {
    pub model: String,
    pub system: String,
    pub user: String,
}

pub type Responder = Arc<dyn Fn(&MockRequest) -> String + Send + Sync>;

/// Server behaviour.
#[derive(Clone)]
pub struct MockScript {
    pub failure_rate: f64,
    pub seed: u64,
    pub latency: Latency,
    pub noise: NoiseMode,
    responder: Option<Responder>,
}

impl fmt::Debug for MockScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockScript")
            .field("failure_rate", &self.failure_rate)
            .field("seed", &self.seed)
            .field("latency", &self.latency)
            .field("noise", &self.noise)
            .field("custom_responder", &self.responder.is_some())
            .finish()
    }
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            failure_rate: 0.0,
            seed: 0,
            latency: Latency::default(),
            noise: NoiseMode::Clean,
            responder: None,
        }
    }
}

impl MockScript {
    pub fn new(failure_rate: f64, seed: u64) -> Result<Self, MockError> {
        if !(0.0..=1.0).contains(&failure_rate) {
            return Err(MockError::FailureRate(failure_rate));
        }
        Ok(Self {
            failure_rate,
            seed,
            ..Self::default()
        })
    }

    pub fn with_latency(mut self, latency: Latency) -> Self {
        self.latency = latency;
        self
    }

    pub fn with_noise(mut self, noise: NoiseMode) -> Self {
        self.noise = noise;
        self
    }

    /// Replaces the default reply body (before noise is applied).
    pub fn with_responder(mut self, f: impl Fn(&MockRequest) -> String + Send + Sync + 'static) -> Self {
        self.responder = Some(Arc::new(f));
        self
    }

    fn reply_json(&self, req: &MockRequest) -> String {
        match &self.responder {
            Some(f) => f(req),
            None => default_reply(req),
        }
    }
}

/// Deterministic reply shaped by the schema block in the system prompt.
///
/// Values depend only on the user prompt, so a row always gets the same
/// answer.
pub fn default_reply(req: &MockRequest) -> String {
    let h = u64::from_be_bytes(
        Sha256::digest(req.user.as_bytes())[..8]
            .try_into()
            .expect("8 bytes"),
    );
    let tag = format!("{:08x}", h >> 32);
    let mut obj = Map::new();
    match schema_block_fields(&req.system) {
        Some(fields) if !fields.is_empty() => {
            for (i, (name, annotation)) in fields.into_iter().enumerate() {
                let v = match annotation.as_str() {
                    "number" => json!((h >> (i % 32)) % 1000),
                    "boolean" => json!((h >> (i % 64)) & 1 == 1),
                    a if a.starts_with("array") => json!([format!("{name} a-{tag}"), format!("{name} b-{tag}")]),
                    _ => json!(format!("{name} for {tag}")),
                };
                obj.insert(name, v);
            }
        }
        _ => {
            obj.insert("result".into(), json!(format!("ok {tag}")));
        }
    }
    Value::Object(obj).to_string()
}

/// What the server did with one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure(u16),
    BadRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestRecord {
    pub seq: u64,
    /// Milliseconds since the server started.
    pub received_ms: u64,
    /// Requests open at arrival, this one included.
    pub in_flight: usize,
    pub latency_ms: u64,
    pub outcome: Outcome,
    /// Occurrence number of this exact request content, from 0.
    pub occurrence: u32,
}

struct MockState {
    script: MockScript,
    started: Instant,
    seq: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    failures: AtomicU64,
    occurrences: Mutex<HashMap<[u8; 32], u32>>,
    log: Mutex<Vec<RequestRecord>>,
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Draws for one request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub fail: bool,
    pub latency_ms: u64,
}

/// The per-request draw, exposed so tests can predict the server.
pub fn decide(script: &MockScript, content_key: &[u8; 32], occurrence: u32) -> Decision {
    let mut h = Sha256::new();
    h.update(script.seed.to_le_bytes());
    h.update(content_key);
    h.update(occurrence.to_le_bytes());
    let digest = h.finalize();
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fail = rng.random::<f64>() < script.failure_rate;
    let latency_ms = match script.latency {
        Latency::Fixed(ms) => ms,
        Latency::Uniform { min, max } => rng.random_range(min..=max),
    };
    Decision { fail, latency_ms }
}

/// Identity of a request's content.
pub fn content_key(req: &MockRequest) -> [u8; 32] {
    let mut h = Sha256::new();
    for part in [&req.model, &req.system, &req.user] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    h.finalize().into()
}

fn parse_request(body: &[u8]) -> Option<MockRequest> {
    let v: Value = serde_json::from_slice(body).ok()?;
    let messages = v.get("messages")?.as_array()?;
    let mut system = String::new();
    let mut user = None;
    for m in messages {
        let role = m.get("role")?.as_str()?;
        let content = m.get("content")?.as_str()?;
        match role {
            "system" => system = content.to_string(),
            "user" => user = Some(content.to_string()),
            _ => {}
        }
    }
    Some(MockRequest {
        model: v.get("model").and_then(Value::as_str).unwrap_or_default().to_string(),
        system,
        user: user?,
    })
}

async fn chat(State(state): State<Arc<MockState>>, body: Bytes) -> Response {
    let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    let _guard = InFlight(&state.in_flight);
    state.max_in_flight.fetch_max(now, Ordering::SeqCst);
    let seq = state.seq.fetch_add(1, Ordering::SeqCst);
    let received_ms = state.started.elapsed().as_millis() as u64;
    let record = |latency_ms, outcome, occurrence| {
        state.log.lock().unwrap().push(RequestRecord {
            seq,
            received_ms,
            in_flight: now,
            latency_ms,
            outcome,
            occurrence,
        });
    };

    let Some(req) = parse_request(&body) else {
        record(0, Outcome::BadRequest, 0);
        return (
            StatusCode::BAD_REQUEST,
            Json(json!({"error": {"message": "malformed chat-completions request", "type": "invalid_request_error"}})),
        )
            .into_response();
    };

    let key = content_key(&req);
    let occurrence = {
        let mut occ = state.occurrences.lock().unwrap();
        let n = occ.entry(key).or_insert(0);
        let current = *n;
        *n += 1;
        current
    };
    let decision = decide(&state.script, &key, occurrence);
    if decision.latency_ms > 0 {
        tokio::time::sleep(Duration::from_millis(decision.latency_ms)).await;
    }

    if decision.fail {
        let status = if state.failures.fetch_add(1, Ordering::SeqCst) % 2 == 0 {
            StatusCode::INTERNAL_SERVER_ERROR
        } else {
            StatusCode::TOO_MANY_REQUESTS
        };
        record(decision.latency_ms, Outcome::Failure(status.as_u16()), occurrence);
        return (
            status,
            Json(json!({"error": {"message": "injected failure", "type": "mock_error"}})),
        )
            .into_response();
    }

    let content = state.script.noise.apply(&state.script.reply_json(&req));
    record(decision.latency_ms, Outcome::Success, occurrence);
    let prompt_chars = req.system.chars().count() + req.user.chars().count();
    let completion_chars = content.chars().count();
    Json(json!({
        "id": format!("mock-{seq}"),
        "object": "chat.completion",
        "created": 0,
        "model": req.model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": "stop",
        }],
        "usage": {
            "prompt_tokens": prompt_chars / 4,
            "completion_tokens": completion_chars / 4,
            "total_tokens": prompt_chars / 4 + completion_chars / 4,
        },
    }))
    .into_response()
}

async fn not_found() -> Response {
    (
        StatusCode::NOT_FOUND,
        Json(json!({"error": {"message": "only chat completions are served", "type": "not_found"}})),
    )
        .into_response()
}

/// A running mock server. Dropping the handle shuts the server down.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl fmt::Debug for MockServer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockServer").field("addr", &self.addr).finish_non_exhaustive()
    }
}

impl MockServer {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub async fn start(script: MockScript, addr: SocketAddr) -> Result<Self, MockError> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let state = Arc::new(MockState {
            script,
            started: Instant::now(),
            seq: AtomicU64::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            failures: AtomicU64::new(0),
            occurrences: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(chat))
            .route("/chat/completions", post(chat))
            .fallback(not_found)
            .with_state(Arc::clone(&state));
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            let served = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
            if let Err(e) = served {
                tracing::error!("mock server stopped: {e}");
            }
        });
        tracing::info!(%addr, "mock provider listening");
        Ok(Self {
            addr,
            state,
            shutdown: Some(tx),
            task: Some(task),
        })
    }

    /// Starts on an ephemeral loopback port.
    pub async fn start_local(script: MockScript) -> Result<Self, MockError> {
        Self::start(script, SocketAddr::from(([127, 0, 0, 1], 0))).await
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL to hand to an OpenAI-compatible client.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn max_in_flight(&self) -> usize {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn in_flight(&self) -> usize {
        self.state.in_flight.load(Ordering::SeqCst)
    }

    pub fn request_count(&self) -> u64 {
        self.state.seq.load(Ordering::SeqCst)
    }

    pub fn request_log(&self) -> Vec<RequestRecord> {
        let mut log = self.state.log.lock().unwrap().clone();
        log.sort_by_key(|r| r.seq);
        log
    }

    /// Clears counters and the log; occurrence history is kept.
    pub fn reset_stats(&self) {
        self.state.max_in_flight.store(self.in_flight(), Ordering::SeqCst);
        self.state.log.lock().unwrap().clear();
    }

    /// Stops accepting connections and waits for the server task.
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }

    /// Serves until the process is interrupted.
    pub async fn wait(mut self) {
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}
