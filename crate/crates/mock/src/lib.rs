//! Scriptable in-process stand-in for OpenAI-compatible endpoints.
//!
//! Serves `/v1/chat/completions`, `/v1/embeddings`, `/v1/token-probs` and
//! `/v1/factuality` on an ephemeral localhost port. Chat replies come from a
//! caller-supplied closure; a status script can inject failures ahead of it.
//! The server records every chat call and the peak number of concurrent
//! requests it saw.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

/// What the chat endpoint answers with.
#[derive(Debug, Clone)]
pub enum Reply {
    Text(String),
    Status(u16, String),
}

#[derive(Debug, Clone)]
pub struct ChatCall {
    pub index: usize,
    pub system: String,
    pub user: String,
    pub body: Value,
}

pub type ChatHandler = Arc<dyn Fn(&ChatCall) -> Reply + Send + Sync>;
pub type ProbsHandler = Arc<dyn Fn(&str, &Value) -> Value + Send + Sync>;
pub type FactualityHandler = Arc<dyn Fn(&str, &str) -> Reply + Send + Sync>;

struct Shared {
    chat: ChatHandler,
    probs: ProbsHandler,
    factuality: FactualityHandler,
    script: Mutex<VecDeque<u16>>,
    latency: Duration,
    dim: usize,
    calls: Mutex<Vec<ChatCall>>,
    requests: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl Shared {
    fn enter(&self) -> FlightGuard<'_> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        FlightGuard(self)
    }
}

struct FlightGuard<'a>(&'a Shared);

impl Drop for FlightGuard<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

pub struct MockBuilder {
    chat: ChatHandler,
    probs: ProbsHandler,
    factuality: FactualityHandler,
    script: Vec<u16>,
    latency: Duration,
    dim: usize,
}

impl Default for MockBuilder {
    fn default() -> Self {
        Self {
            chat: echo_user(),
            probs: Arc::new(|_, tokens| uniform_rows(tokens)),
            factuality: Arc::new(|c, r| {
                let same = if c.trim() == r.trim() { 1.0 } else { 0.5 };
                Reply::Text(json!({"alignscore": same, "summac": same}).to_string())
            }),
            script: Vec::new(),
            latency: Duration::ZERO,
            dim: 32,
        }
    }
}

impl MockBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn chat(mut self, handler: impl Fn(&ChatCall) -> Reply + Send + Sync + 'static) -> Self {
        self.chat = Arc::new(handler);
        self
    }

    /// Statuses returned, in order, before any handler runs. Applies to every route.
    pub fn script(mut self, statuses: impl IntoIterator<Item = u16>) -> Self {
        self.script = statuses.into_iter().collect();
        self
    }

    pub fn latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn embedding_dim(mut self, dim: usize) -> Self {
        self.dim = dim;
        self
    }

    /// Handler receives the answer text and the `tokens` array; returns `rows`.
    pub fn token_probs(mut self, handler: impl Fn(&str, &Value) -> Value + Send + Sync + 'static) -> Self {
        self.probs = Arc::new(handler);
        self
    }

    /// Handler receives `(candidate, reference)`; a `Text` reply must be the JSON body.
    pub fn factuality(mut self, handler: impl Fn(&str, &str) -> Reply + Send + Sync + 'static) -> Self {
        self.factuality = Arc::new(handler);
        self
    }

    fn shared(self) -> Arc<Shared> {
        Arc::new(Shared {
            chat: self.chat,
            probs: self.probs,
            factuality: self.factuality,
            script: Mutex::new(self.script.into()),
            latency: self.latency,
            dim: self.dim,
            calls: Mutex::new(Vec::new()),
            requests: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        })
    }

    /// Starts on the current tokio runtime.
    pub async fn start(self) -> MockServer {
        let shared = self.shared();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
            .await
            .expect("bind mock listener");
        let addr = listener.local_addr().expect("mock address");
        let app = router(shared.clone());
        tokio::spawn(async move {
            axum::serve(listener, app).await.expect("mock server");
        });
        MockServer { addr, shared }
    }

    /// Starts on a dedicated thread with its own runtime, for synchronous callers.
    pub fn start_detached(self) -> MockServer {
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
                .expect("mock runtime");
            rt.block_on(async move {
                let server = self.start().await;
                tx.send(server).expect("hand back mock server");
                std::future::pending::<()>().await;
            });
        });
        rx.recv().expect("mock server started")
    }
}

pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
}

impl MockServer {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn chat_calls(&self) -> Vec<ChatCall> {
        self.shared.calls.lock().unwrap().clone()
    }

    /// Total requests received on any route, including scripted failures.
    pub fn request_count(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.shared.peak.load(Ordering::SeqCst)
    }
}

fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/v1/embeddings", post(embeddings))
        .route("/v1/token-probs", post(token_probs))
        .route("/v1/factuality", post(factuality))
        .with_state(shared)
}

fn status_response(code: u16, body: String) -> Response {
    let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, body).into_response()
}

fn scripted(shared: &Shared) -> Option<Response> {
    let code = shared.script.lock().unwrap().pop_front()?;
    Some(status_response(code, format!("scripted status {code}")))
}

fn message_content(body: &Value, role: &str) -> String {
    body["messages"]
        .as_array()
        .into_iter()
        .flatten()
        .find(|m| m["role"] == role)
        .and_then(|m| m["content"].as_str())
        .unwrap_or_default()
        .to_string()
}

async fn chat(State(shared): State<Arc<Shared>>, Json(body): Json<Value>) -> Response {
    let _guard = shared.enter();
    if !shared.latency.is_zero() {
        tokio::time::sleep(shared.latency).await;
    }
    if let Some(r) = scripted(&shared) {
        return r;
    }
    let call = {
        let mut calls = shared.calls.lock().unwrap();
        let call = ChatCall {
            index: calls.len(),
            system: message_content(&body, "system"),
            user: message_content(&body, "user"),
            body: body.clone(),
        };
        calls.push(call.clone());
        call
    };
    match (shared.chat)(&call) {
        Reply::Status(code, text) => status_response(code, text),
        Reply::Text(text) => {
            let prompt_tokens = call.user.split_whitespace().count();
            let completion_tokens = text.split_whitespace().count();
            Json(json!({
                "id": format!("mock-{}", call.index),
                "object": "chat.completion",
                "model": body["model"],
                "choices": [{
                    "index": 0,
                    "message": {"role": "assistant", "content": text},
                    "finish_reason": "stop"
                }],
                "usage": {
                    "prompt_tokens": prompt_tokens,
                    "completion_tokens": completion_tokens,
                    "total_tokens": prompt_tokens + completion_tokens
                }
            }))
            .into_response()
        }
    }
}

async fn embeddings(State(shared): State<Arc<Shared>>, Json(body): Json<Value>) -> Response {
    let _guard = shared.enter();
    if let Some(r) = scripted(&shared) {
        return r;
    }
    let inputs: Vec<String> = match &body["input"] {
        Value::String(s) => vec![s.clone()],
        Value::Array(items) => items
            .iter()
            .map(|v| v.as_str().unwrap_or_default().to_string())
            .collect(),
        _ => return status_response(400, "input must be a string or array".into()),
    };
    let data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .map(|(i, s)| json!({"object": "embedding", "index": i, "embedding": hashed_vector(s, shared.dim)}))
        .collect();
    Json(json!({"object": "list", "model": body["model"], "data": data})).into_response()
}

async fn token_probs(State(shared): State<Arc<Shared>>, Json(body): Json<Value>) -> Response {
    let _guard = shared.enter();
    if let Some(r) = scripted(&shared) {
        return r;
    }
    let text = body["text"].as_str().unwrap_or_default();
    let rows = (shared.probs)(text, &body["tokens"]);
    Json(json!({"rows": rows})).into_response()
}

async fn factuality(State(shared): State<Arc<Shared>>, Json(body): Json<Value>) -> Response {
    let _guard = shared.enter();
    if let Some(r) = scripted(&shared) {
        return r;
    }
    let candidate = body["candidate"].as_str().unwrap_or_default();
    let reference = body["reference"].as_str().unwrap_or_default();
    match (shared.factuality)(candidate, reference) {
        Reply::Status(code, text) => status_response(code, text),
        Reply::Text(text) => ([("content-type", "application/json")], text).into_response(),
    }
}

/// Replies with the user message verbatim.
pub fn echo_user() -> ChatHandler {
    Arc::new(|call: &ChatCall| Reply::Text(call.user.clone()))
}

/// Deterministic pseudo-random unit vector keyed by the lowercased string.
pub fn hashed_vector(s: &str, dim: usize) -> Vec<f64> {
    let mut state: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.to_lowercase().bytes() {
        state ^= u64::from(b);
        state = state.wrapping_mul(0x0100_0000_01b3);
    }
    let mut v: Vec<f64> = (0..dim)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Uniform distribution over 11 classes for every token.
pub fn uniform_rows(tokens: &Value) -> Value {
    let n = tokens.as_array().map_or(0, Vec::len);
    let row = vec![1.0 / 11.0; 11];
    json!(vec![row; n])
}
