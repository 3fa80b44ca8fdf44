//! Scripted chat-completions server for tests and offline demos.
//!
//! A script maps each incoming request to a reply: a completion with
//! per-token logprobs, an HTTP status, a raw body, or a delayed reply.
//! The server records every request and the peak number of concurrent
//! requests it observed.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::prompting::{ChatMessage, Role};

/// Logprob given to every token when a script does not choose one.
pub const DEFAULT_TOKEN_LOGPROB: f64 = -0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct StubRequest {
    /// Arrival order, starting at 0.
    pub seq: u64,
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u64>,
    pub logprobs: bool,
    pub authorization: Option<String>,
}

impl StubRequest {
    pub fn user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }

    pub fn system_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StubReply {
    Completion {
        text: String,
        /// `None` omits logprobs from the response.
        logprobs: Option<Vec<(String, f64)>>,
        finish_reason: String,
    },
    Status(u16, String),
    RawBody(String),
    Delay(Duration, Box<StubReply>),
}

impl StubReply {
    /// Completion tokenized by [`tokenize`], each token at `logprob`.
    pub fn text_with_logprob(text: impl Into<String>, logprob: f64) -> Self {
        let text = text.into();
        let logprobs = tokenize(&text).into_iter().map(|t| (t, logprob)).collect();
        StubReply::Completion {
            text,
            logprobs: Some(logprobs),
            finish_reason: "stop".into(),
        }
    }

    pub fn text(text: impl Into<String>) -> Self {
        Self::text_with_logprob(text, DEFAULT_TOKEN_LOGPROB)
    }

    pub fn without_logprobs(text: impl Into<String>) -> Self {
        StubReply::Completion {
            text: text.into(),
            logprobs: None,
            finish_reason: "stop".into(),
        }
    }

    pub fn delayed(self, delay: Duration) -> Self {
        StubReply::Delay(delay, Box::new(self))
    }
}

/// Splits text into tokens that concatenate back to it: each token is a
/// run of whitespace followed by a run of non-whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut in_word = false;
    for c in text.chars() {
        if c.is_whitespace() && in_word {
            tokens.push(std::mem::take(&mut current));
            in_word = false;
        }
        if !c.is_whitespace() {
            in_word = true;
        }
        current.push(c);
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

pub type Script = Arc<dyn Fn(&StubRequest) -> StubReply + Send + Sync>;

struct Shared {
    script: Script,
    seq: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    log: Mutex<Vec<StubRequest>>,
}

struct InFlight<'a>(&'a Shared);

impl<'a> InFlight<'a> {
    fn enter(shared: &'a Shared) -> Self {
        let now = shared.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        shared.max_in_flight.fetch_max(now, Ordering::SeqCst);
        Self(shared)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn parse_request(seq: u64, headers: &HeaderMap, body: &str) -> Result<StubRequest, String> {
    let v: Value = serde_json::from_str(body).map_err(|e| format!("invalid JSON: {e}"))?;
    let model = v
        .get("model")
        .and_then(Value::as_str)
        .ok_or("missing model")?
        .to_string();
    let messages: Vec<ChatMessage> = serde_json::from_value(v.get("messages").cloned().ok_or("missing messages")?)
        .map_err(|e| format!("invalid messages: {e}"))?;
    Ok(StubRequest {
        seq,
        model,
        messages,
        temperature: v.get("temperature").and_then(Value::as_f64),
        max_tokens: v.get("max_tokens").and_then(Value::as_u64),
        logprobs: v.get("logprobs").and_then(Value::as_bool).unwrap_or(false),
        authorization: headers
            .get("authorization")
            .and_then(|h| h.to_str().ok())
            .map(str::to_string),
    })
}

fn completion_body(model: &str, seq: u64, text: &str, logprobs: &Option<Vec<(String, f64)>>, finish: &str) -> Value {
    let logprobs = logprobs.as_ref().map(|tokens| {
        json!({
            "content": tokens
                .iter()
                .map(|(t, lp)| json!({"token": t, "logprob": lp, "top_logprobs": []}))
                .collect::<Vec<_>>()
        })
    });
    json!({
        "id": format!("stub-{seq}"),
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": text},
            "logprobs": logprobs,
            "finish_reason": finish,
        }],
    })
}

async fn handle(State(shared): State<Arc<Shared>>, headers: HeaderMap, body: String) -> Response {
    let _guard = InFlight::enter(&shared);
    let seq = shared.seq.fetch_add(1, Ordering::SeqCst);
    let request = match parse_request(seq, &headers, &body) {
        Ok(r) => r,
        Err(e) => return (StatusCode::BAD_REQUEST, e).into_response(),
    };
    shared.log.lock().expect("log lock").push(request.clone());

    let mut reply = (shared.script)(&request);
    while let StubReply::Delay(d, inner) = reply {
        tokio::time::sleep(d).await;
        reply = *inner;
    }
    match reply {
        StubReply::Completion {
            text,
            logprobs,
            finish_reason,
        } => {
            let logprobs = if request.logprobs { logprobs } else { None };
            axum::Json(completion_body(&request.model, seq, &text, &logprobs, &finish_reason)).into_response()
        }
        StubReply::Status(code, msg) => {
            let code = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (code, msg).into_response()
        }
        StubReply::RawBody(raw) => ([("content-type", "application/json")], raw).into_response(),
        StubReply::Delay(..) => unreachable!("delays are unwrapped above"),
    }
}

/// A running stub. Dropping it without [`StubServer::shutdown`] aborts
/// the server task.
pub struct StubServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds an ephemeral port on 127.0.0.1.
    pub async fn start(script: impl Fn(&StubRequest) -> StubReply + Send + Sync + 'static) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0".parse().expect("valid address"), script).await
    }

    pub async fn bind(
        addr: SocketAddr,
        script: impl Fn(&StubRequest) -> StubReply + Send + Sync + 'static,
    ) -> std::io::Result<Self> {
        let shared = Arc::new(Shared {
            script: Arc::new(script),
            seq: AtomicU64::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(handle))
            .route("/chat/completions", post(handle))
            .with_state(shared.clone());
        let listener = tokio::net::TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            let server = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = server.await {
                log::error!("stub server failed: {e}");
            }
        });
        Ok(Self {
            addr,
            shared,
            shutdown: Some(tx),
            task: Some(task),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `http://127.0.0.1:<port>/v1`
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn request_count(&self) -> u64 {
        self.shared.seq.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.shared.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<StubRequest> {
        self.shared.log.lock().expect("log lock").clone()
    }

    /// Stops accepting connections and waits for open requests to finish.
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        if let Some(task) = self.task.take() {
            task.abort();
        }
    }
}
