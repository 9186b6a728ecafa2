//! Chat-completion abstraction: a live HTTP backend, a transcript-replay
//! backend and a scripted backend, all behind [`ChatBackend`], plus the
//! append-only transcript store.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::estimate_tokens;
use crate::prompts::Round;

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 2048;
pub const DEFAULT_TOKEN_CAP: usize = 10_000;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("no recorded response for sample {sample_key} round {round}")]
    MissingRecord { sample_key: String, round: Round },
    #[error("recorded request digest differs for sample {sample_key} round {round}")]
    DigestMismatch { sample_key: String, round: Round },
    #[error("prompt estimated at {estimate} tokens exceeds the cap of {cap}")]
    Budget { estimate: usize, cap: usize },
    #[error("duplicate transcript record ({run_id}, {sample_key}, {round})")]
    Duplicate {
        run_id: String,
        sample_key: String,
        round: Round,
    },
    #[error("malformed request: {0}")]
    Request(String),
    #[error("transcript store {path}: {message}")]
    Store { path: String, message: String },
    #[error("scripted responder failed: {0}")]
    Scripted(String),
}

pub type Result<T> = std::result::Result<T, LlmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn new(model_name: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model_name: model_name.into(),
            temperature: DEFAULT_TEMPERATURE,
            messages,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    /// Optional leading system turn, then strictly alternating user and
    /// assistant turns ending on a user turn; user/assistant content
    /// non-empty.
    pub fn validate(&self) -> Result<()> {
        let body = match self.messages.first() {
            Some(m) if m.role == Role::System => &self.messages[1..],
            _ => &self.messages[..],
        };
        if body.is_empty() {
            return Err(LlmError::Request("no user turn".into()));
        }
        for (i, m) in body.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if m.role != expected {
                return Err(LlmError::Request(format!(
                    "turn {i} is {:?}, expected {expected:?}",
                    m.role
                )));
            }
            if m.content.trim().is_empty() {
                return Err(LlmError::Request(format!("turn {i} has empty content")));
            }
        }
        if body.len() % 2 == 0 {
            return Err(LlmError::Request("conversation must end on a user turn".into()));
        }
        Ok(())
    }

    /// Token proxy over every message in the conversation.
    pub fn token_estimate(&self) -> usize {
        self.messages.iter().map(|m| estimate_tokens(&m.content)).sum()
    }

    /// SHA-256 over the canonical JSON of the request.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// Semantic key of a call: `(sample_key, round)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CallContext {
    pub sample_key: String,
    pub round: Round,
}

impl CallContext {
    pub fn new(sample_key: impl Into<String>, round: Round) -> Self {
        Self {
            sample_key: sample_key.into(),
            round,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
    pub latency_ms: u64,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest, ctx: &CallContext) -> Result<Completion>;

    /// Calls that actually reached the backend.
    fn call_count(&self) -> usize;
}

/// Enforces the context budget before any backend call.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub token_cap: usize,
}

impl fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmClient")
            .field("model_name", &self.model_name)
            .field("token_cap", &self.token_cap)
            .finish()
    }
}

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>, model_name: impl Into<String>) -> Self {
        Self {
            backend,
            model_name: model_name.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            token_cap: DEFAULT_TOKEN_CAP,
        }
    }

    pub fn with_token_cap(mut self, cap: usize) -> Self {
        self.token_cap = cap;
        self
    }

    pub fn backend(&self) -> &Arc<dyn ChatBackend> {
        &self.backend
    }

    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model_name: self.model_name.clone(),
            temperature: self.temperature,
            messages,
            max_output_tokens: self.max_output_tokens,
        }
    }

    pub fn complete(&self, request: &ChatRequest, ctx: &CallContext) -> Result<Completion> {
        request.validate()?;
        let estimate = request.token_estimate();
        if estimate > self.token_cap {
            return Err(LlmError::Budget {
                estimate,
                cap: self.token_cap,
            });
        }
        self.backend.complete(request, ctx)
    }
}

type Responder = dyn Fn(&ChatRequest, &CallContext) -> std::result::Result<String, String> + Send + Sync;

/// Backend answering from a registered closure. Used by tests and offline
/// demos.
pub struct ScriptedBackend {
    responder: Box<Responder>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new<F>(responder: F) -> Self
    where
        F: Fn(&ChatRequest, &CallContext) -> std::result::Result<String, String> + Send + Sync + 'static,
    {
        Self {
            responder: Box::new(responder),
            calls: AtomicUsize::new(0),
        }
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest, ctx: &CallContext) -> Result<Completion> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = (self.responder)(request, ctx).map_err(LlmError::Scripted)?;
        Ok(Completion {
            text,
            attempts: 1,
            latency_ms: 0,
        })
    }

    fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub run_id: String,
    pub dataset: String,
    pub sample_key: String,
    pub round: Round,
    pub request_digest: String,
    pub response: String,
    pub latency_ms: u64,
    pub attempt: u32,
}

type RecordKey = (String, String, Round);

fn key_of(r: &TranscriptRecord) -> RecordKey {
    (r.run_id.clone(), r.sample_key.clone(), r.round)
}

struct StoreInner {
    records: Vec<TranscriptRecord>,
    keys: HashSet<RecordKey>,
    file: Option<File>,
}

/// Append-only JSONL transcript, unique on `(run_id, sample_key, round)`.
pub struct TranscriptStore {
    path: Option<PathBuf>,
    inner: Mutex<StoreInner>,
}

impl TranscriptStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            inner: Mutex::new(StoreInner {
                records: Vec::new(),
                keys: HashSet::new(),
                file: None,
            }),
        }
    }

    /// Opens (creating if absent) a store file and loads what it holds.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let store_err = |message: String| LlmError::Store {
            path: path.display().to_string(),
            message,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| store_err(e.to_string()))?;
        }
        let mut records = Vec::new();
        let mut keys = HashSet::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(|e| store_err(e.to_string()))?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| store_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: TranscriptRecord = serde_json::from_str(&line)
                    .map_err(|e| store_err(format!("line {}: {e}", i + 1)))?;
                if !keys.insert(key_of(&rec)) {
                    return Err(LlmError::Duplicate {
                        run_id: rec.run_id,
                        sample_key: rec.sample_key,
                        round: rec.round,
                    });
                }
                records.push(rec);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| store_err(e.to_string()))?;
        Ok(Self {
            path: Some(path),
            inner: Mutex::new(StoreInner {
                records,
                keys,
                file: Some(file),
            }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn record(&self, record: TranscriptRecord) -> Result<()> {
        let mut inner = self.inner.lock().expect("store lock");
        let key = key_of(&record);
        if inner.keys.contains(&key) {
            return Err(LlmError::Duplicate {
                run_id: record.run_id,
                sample_key: record.sample_key,
                round: record.round,
            });
        }
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&record).expect("record serializes");
            line.push('\n');
            let path = self.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| LlmError::Store {
                    path,
                    message: e.to_string(),
                })?;
        }
        inner.keys.insert(key);
        inner.records.push(record);
        Ok(())
    }

    pub fn contains(&self, run_id: &str, sample_key: &str, round: Round) -> bool {
        let inner = self.inner.lock().expect("store lock");
        inner
            .keys
            .contains(&(run_id.to_string(), sample_key.to_string(), round))
    }

    pub fn get(&self, run_id: &str, sample_key: &str, round: Round) -> Option<TranscriptRecord> {
        let inner = self.inner.lock().expect("store lock");
        inner
            .records
            .iter()
            .find(|r| r.run_id == run_id && r.sample_key == sample_key && r.round == round)
            .cloned()
    }

    pub fn records(&self) -> Vec<TranscriptRecord> {
        self.inner.lock().expect("store lock").records.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Answers from recorded transcripts keyed by `(sample_key, round)`, so the
/// result never depends on call order.
pub struct ReplayBackend {
    records: HashMap<(String, Round), TranscriptRecord>,
    strict: bool,
    calls: AtomicUsize,
}

impl ReplayBackend {
    /// Uses records of `run_id`, or of the whole store when `None` (in which
    /// case a key recorded by two runs is ambiguous and rejected).
    pub fn from_records(
        records: impl IntoIterator<Item = TranscriptRecord>,
        run_id: Option<&str>,
        strict: bool,
    ) -> Result<Self> {
        let mut map = HashMap::new();
        for r in records {
            if run_id.is_some_and(|id| id != r.run_id) {
                continue;
            }
            let key = (r.sample_key.clone(), r.round);
            if let Some(prev) = map.insert(key, r) {
                return Err(LlmError::Duplicate {
                    run_id: prev.run_id,
                    sample_key: prev.sample_key,
                    round: prev.round,
                });
            }
        }
        Ok(Self {
            records: map,
            strict,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn from_store(store: &TranscriptStore, run_id: Option<&str>, strict: bool) -> Result<Self> {
        Self::from_records(store.records(), run_id, strict)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest, ctx: &CallContext) -> Result<Completion> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let rec = self
            .records
            .get(&(ctx.sample_key.clone(), ctx.round))
            .ok_or_else(|| LlmError::MissingRecord {
                sample_key: ctx.sample_key.clone(),
                round: ctx.round,
            })?;
        if rec.request_digest != request.digest() {
            if self.strict {
                return Err(LlmError::DigestMismatch {
                    sample_key: ctx.sample_key.clone(),
                    round: ctx.round,
                });
            }
            log::warn!(
                "replay: request for {} round {} differs from the recorded one",
                ctx.sample_key,
                ctx.round
            );
        }
        Ok(Completion {
            text: rec.response.clone(),
            attempts: 1,
            latency_ms: 0,
        })
    }

    fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_delay_ms: u64,
    pub multiplier: f64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            initial_delay_ms: 1000,
            multiplier: 2.0,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1` (attempts count from 1).
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let factor = self.multiplier.powi(attempt.saturating_sub(1) as i32);
        let ms = (self.initial_delay_ms as f64 * factor).min(self.max_delay_ms as f64);
        Duration::from_millis(ms as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Full chat-completions endpoint URL.
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Requests-per-minute ceiling; 0 disables throttling.
    #[serde(default)]
    pub requests_per_minute: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    "REASONTSC_API_KEY".into()
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout() -> u64 {
    300
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key_env: default_key_env(),
            retry: RetryPolicy::default(),
            max_in_flight: default_in_flight(),
            requests_per_minute: 0,
            timeout_secs: default_timeout(),
        }
    }
}

/// Counting semaphore plus a sliding one-minute request window.
struct Throttle {
    in_flight: Mutex<usize>,
    cv: Condvar,
    limit: usize,
    rpm: u32,
    window: Mutex<VecDeque<Instant>>,
}

struct Permit<'a>(&'a Throttle);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("throttle lock");
        *n -= 1;
        self.0.cv.notify_one();
    }
}

impl Throttle {
    fn new(limit: usize, rpm: u32) -> Self {
        Self {
            in_flight: Mutex::new(0),
            cv: Condvar::new(),
            limit: limit.max(1),
            rpm,
            window: Mutex::new(VecDeque::new()),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("throttle lock");
        while *n >= self.limit {
            n = self.cv.wait(n).expect("throttle lock");
        }
        *n += 1;
        drop(n);
        if self.rpm > 0 {
            loop {
                let wait = {
                    let mut w = self.window.lock().expect("throttle lock");
                    let now = Instant::now();
                    while w.front().is_some_and(|t| now.duration_since(*t) >= Duration::from_secs(60)) {
                        w.pop_front();
                    }
                    if w.len() < self.rpm as usize {
                        w.push_back(now);
                        None
                    } else {
                        w.front().map(|t| Duration::from_secs(60) - now.duration_since(*t))
                    }
                };
                match wait {
                    None => break,
                    Some(d) => std::thread::sleep(d),
                }
            }
        }
        Permit(self)
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: &'a [ChatMessage],
    max_tokens: u32,
}

enum AttemptError {
    Fatal(String),
    Retryable(String),
}

/// Chat-completions client over blocking HTTP with retry and throttling.
pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    throttle: Throttle,
    calls: AtomicUsize,
}

impl HttpBackend {
    /// Reads the API key from the environment variable named in the config.
    pub fn new(config: HttpConfig) -> Result<Self> {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        let throttle = Throttle::new(config.max_in_flight, config.requests_per_minute);
        Ok(Self {
            config,
            api_key,
            client,
            throttle,
            calls: AtomicUsize::new(0),
        })
    }

    fn attempt(&self, request: &ChatRequest) -> std::result::Result<String, AttemptError> {
        let _permit = self.throttle.acquire();
        self.calls.fetch_add(1, Ordering::SeqCst);
        let wire = WireRequest {
            model: &request.model_name,
            temperature: request.temperature,
            messages: &request.messages,
            max_tokens: request.max_output_tokens,
        };
        let mut req = self.client.post(&self.config.endpoint).json(&wire);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| AttemptError::Retryable(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| AttemptError::Retryable(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Retryable(format!("HTTP {status}: {body}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(format!("HTTP {status}: {body}")));
        }
        extract_content(&body).ok_or_else(|| AttemptError::Fatal(format!("unexpected response body: {body}")))
    }
}

/// Pulls `choices[0].message.content` out of a chat-completions body.
pub fn extract_content(body: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(body).ok()?;
    v.pointer("/choices/0/message/content")?
        .as_str()
        .map(str::to_string)
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest, _ctx: &CallContext) -> Result<Completion> {
        let start = Instant::now();
        let policy = &self.config.retry;
        let max = policy.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            match self.attempt(request) {
                Ok(text) => {
                    return Ok(Completion {
                        text,
                        attempts: attempt,
                        latency_ms: start.elapsed().as_millis() as u64,
                    })
                }
                Err(AttemptError::Fatal(msg)) => return Err(LlmError::Config(msg)),
                Err(AttemptError::Retryable(msg)) => {
                    log::warn!("attempt {attempt}/{max} failed: {msg}");
                    last = msg;
                    if attempt < max {
                        std::thread::sleep(policy.delay_after(attempt));
                    }
                }
            }
        }
        Err(LlmError::Transport {
            attempts: max,
            message: last,
        })
    }

    fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Groups store records by run for inspection tools.
pub fn records_by_run(records: &[TranscriptRecord]) -> BTreeMap<String, Vec<&TranscriptRecord>> {
    let mut out: BTreeMap<String, Vec<&TranscriptRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.run_id.clone()).or_default().push(r);
    }
    out
}
