//! Chat-completion access.
//!
//! A [`Gateway`] wraps a [`Backend`] (the HTTP endpoint or a scripted mock)
//! and adds request validation, retries with exponential backoff for
//! transient failures, a bound on concurrently outstanding calls and a
//! prompt-keyed on-disk response cache.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::sha256_hex;

/// Environment variable holding the endpoint credential.
pub const API_KEY_ENV: &str = "TAGEVOL_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
}

impl ChatRequest {
    /// A single user message.
    pub fn user(model: impl Into<String>, prompt: impl Into<String>, temperature: f64, max_tokens: u32) -> Self {
        ChatRequest {
            model: model.into(),
            messages: vec![Message {
                role: Role::User,
                content: prompt.into(),
            }],
            temperature,
            max_tokens,
            top_p: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err("request has no user message".into());
        }
        if !(self.temperature >= 0.0) {
            return Err(format!("temperature {} is negative", self.temperature));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(format!("top_p {p} outside (0, 1]"));
            }
        }
        Ok(())
    }

    /// Message contents joined by blank lines. For the single-message
    /// requests the pipeline issues this is exactly the prompt text, and it
    /// is what mock scripts are keyed on.
    pub fn rendered_prompt(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// Key used by mock scripts: SHA-256 of the rendered prompt.
    pub fn prompt_key(&self) -> String {
        prompt_key(&self.rendered_prompt())
    }

    /// Key used by the response cache: covers model and decoding params.
    pub fn cache_key(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("request serializes"))
    }
}

pub fn prompt_key(prompt: &str) -> String {
    sha256_hex(prompt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: String,
    #[serde(default)]
    pub usage: Option<Usage>,
    /// Transient failures retried before this reply arrived.
    #[serde(default)]
    pub retries: u32,
}

impl ChatResponse {
    pub fn text(content: impl Into<String>) -> Self {
        ChatResponse {
            content: content.into(),
            finish_reason: "stop".into(),
            usage: None,
            retries: 0,
        }
    }
}

/// Failure of a single backend call, before retry handling.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed backend reply: {0}")]
    Malformed(String),
    #[error("no scripted response for prompt {key}")]
    Unscripted { key: String },
}

impl BackendError {
    /// Timeouts, connection failures, 408, 429 and 5xx are retried.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { code, .. } => matches!(code, 408 | 429 | 500..=599),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("gave up after {attempts} attempts: {last_error}")]
    ExhaustedRetries { attempts: u32, last_error: BackendError },
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("malformed backend reply: {0}")]
    MalformedBackendReply(String),
    #[error("no scripted response for prompt {key}")]
    UnscriptedPrompt { key: String },
    #[error("backend refused request: {0}")]
    Rejected(BackendError),
}

impl GatewayError {
    fn permanent(err: BackendError) -> Self {
        match err {
            BackendError::Status { code: 401 | 403, body } => GatewayError::Auth(body),
            BackendError::Malformed(m) => GatewayError::MalformedBackendReply(m),
            BackendError::Unscripted { key } => GatewayError::UnscriptedPrompt { key },
            other => GatewayError::Rejected(other),
        }
    }
}

/// Something that answers chat requests.
pub trait Backend: Send + Sync {
    fn call(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn call(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).call(request)
    }
}

/// One entry of a mock script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub prompt_sha256: String,
    pub response: String,
}

type LatencyFn = dyn Fn(&ChatRequest) -> Duration + Send + Sync;

/// Replays scripted responses keyed by the SHA-256 of the rendered prompt.
#[derive(Default)]
pub struct MockBackend {
    script: RwLock<HashMap<String, String>>,
    latency: Option<Box<LatencyFn>>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Simulated per-request latency, for exercising concurrency.
    pub fn with_latency(mut self, latency: impl Fn(&ChatRequest) -> Duration + Send + Sync + 'static) -> Self {
        self.latency = Some(Box::new(latency));
        self
    }

    /// Registers a reply for `prompt_key`. Re-registering replaces the
    /// previous reply.
    pub fn register(&self, prompt_key: impl Into<String>, response: impl Into<String>) {
        let key = prompt_key.into();
        let mut script = self.script.write().expect("mock script lock");
        if script.insert(key.clone(), response.into()).is_some() {
            log::warn!("mock script already had a response for {key}; replacing it");
        }
    }

    pub fn register_prompt(&self, prompt: &str, response: impl Into<String>) {
        self.register(prompt_key(prompt), response);
    }

    pub fn from_entries(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mock = MockBackend::new();
        for e in entries {
            mock.register(e.prompt_sha256, e.response);
        }
        mock
    }

    pub fn load_script(path: &Path) -> Result<Self, ScriptError> {
        let text = fs::read_to_string(path).map_err(|e| ScriptError::Io(path.to_path_buf(), e))?;
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(&text).map_err(|e| ScriptError::Format(path.to_path_buf(), e))?;
        Ok(Self::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.script.read().expect("mock script lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Backend for MockBackend {
    fn call(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        if let Some(latency) = &self.latency {
            std::thread::sleep(latency(request));
        }
        let key = request.prompt_key();
        let script = self.script.read().expect("mock script lock");
        script
            .get(&key)
            .map(|r| ChatResponse::text(r.clone()))
            .ok_or(BackendError::Unscripted { key })
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot access mock script {0}: {1}")]
    Io(PathBuf, io::Error),
    #[error("mock script {0} is not a list of {{prompt_sha256, response}}: {1}")]
    Format(PathBuf, serde_json::Error),
}

/// Passes calls through to an inner backend and remembers every successful
/// reply as a mock script entry.
pub struct RecordingBackend<B> {
    inner: B,
    recorded: Mutex<BTreeMap<String, String>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    /// Recorded entries ordered by prompt hash.
    pub fn script(&self) -> Vec<ScriptEntry> {
        self.recorded
            .lock()
            .expect("recording lock")
            .iter()
            .map(|(k, v)| ScriptEntry {
                prompt_sha256: k.clone(),
                response: v.clone(),
            })
            .collect()
    }

    pub fn save_script(&self, path: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(&self.script()).expect("script serializes");
        fs::write(path, text)
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn call(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let reply = self.inner.call(request)?;
        self.recorded
            .lock()
            .expect("recording lock")
            .insert(request.prompt_key(), reply.content.clone());
        Ok(reply)
    }
}

/// Raw HTTP POST used by [`HttpBackend`]; returns status and body text.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value) -> Result<(u16, String), String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        UreqTransport { agent }
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value) -> Result<(u16, String), String> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok((status, text))
    }
}

/// OpenAI-style chat-completion endpoint.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    transport: Box<dyn HttpTransport>,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        Self::with_transport(endpoint, api_key, Box::new(UreqTransport::new(timeout)))
    }

    pub fn with_transport(endpoint: impl Into<String>, api_key: Option<String>, transport: Box<dyn HttpTransport>) -> Self {
        HttpBackend {
            endpoint: endpoint.into(),
            api_key,
            transport,
        }
    }

    pub fn request_body(request: &ChatRequest) -> Value {
        let mut body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(p) = request.top_p {
            body["top_p"] = json!(p);
        }
        body
    }

    pub fn parse_reply(body: &str) -> Result<ChatResponse, BackendError> {
        let v: Value = serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let choice = v
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| BackendError::Malformed("reply has no choices".into()))?;
        let finish_reason = choice
            .get("finish_reason")
            .and_then(Value::as_str)
            .unwrap_or("stop")
            .to_string();
        let content = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Malformed("first choice has no message content".into()))?;
        let usage = v.get("usage").and_then(|u| {
            Some(Usage {
                prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
                output_tokens: u.get("completion_tokens")?.as_u64()?,
            })
        });
        Ok(ChatResponse {
            content: content.to_string(),
            finish_reason,
            usage,
            retries: 0,
        })
    }
}

impl Backend for HttpBackend {
    fn call(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let (status, body) = self
            .transport
            .post_json(&self.endpoint, self.api_key.as_deref(), &Self::request_body(request))
            .map_err(BackendError::Transport)?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { code: status, body });
        }
        Self::parse_reply(&body)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): `base * 2^retry`, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(31)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Prompt-keyed response cache, one JSON file per entry.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

static CACHE_TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ResponseCache { dir })
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<ChatResponse> {
        let text = fs::read_to_string(self.entry_path(key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Writes through a temporary file and renames, so readers only ever
    /// see complete entries.
    pub fn put(&self, key: &str, response: &ChatResponse) -> io::Result<()> {
        let tmp = self.dir.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            CACHE_TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, serde_json::to_vec(response).expect("response serializes"))?;
        fs::rename(&tmp, self.entry_path(key))
    }

    pub fn remove(&self, key: &str) {
        let _ = fs::remove_file(self.entry_path(key));
    }
}

/// Counting semaphore bounding outstanding backend calls.
struct Limiter {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Limiter {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().expect("limiter lock");
        while *active >= self.max {
            active = self.freed.wait(active).expect("limiter lock");
        }
        *active += 1;
        self.peak.fetch_max(*active, Ordering::SeqCst);
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().expect("limiter lock");
        *active -= 1;
        self.0.freed.notify_one();
    }
}

/// Shared entry point for all model calls.
pub struct Gateway {
    backend: Box<dyn Backend>,
    policy: RetryPolicy,
    cache: Option<ResponseCache>,
    limiter: Limiter,
    exec: Execution,
}

impl Gateway {
    pub fn new(backend: impl Backend + 'static) -> Self {
        Gateway {
            backend: Box::new(backend),
            policy: RetryPolicy::default(),
            cache: None,
            limiter: Limiter::new(8),
            exec: Execution::default(),
        }
    }

    pub fn with_retry_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_max_in_flight(mut self, max_in_flight: usize) -> Self {
        self.limiter = Limiter::new(max_in_flight);
        self
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn max_in_flight(&self) -> usize {
        self.limiter.max
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.policy
    }

    /// Highest number of simultaneously outstanding backend calls so far.
    pub fn peak_in_flight(&self) -> usize {
        self.limiter.peak.load(Ordering::SeqCst)
    }

    /// Sends one request, consulting the cache first.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate().map_err(GatewayError::InvalidRequest)?;
        let key = self.cache.as_ref().map(|_| request.cache_key());
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(mut hit) = cache.get(key) {
                hit.retries = 0;
                return Ok(hit);
            }
        }
        let response = self.call_with_retries(request)?;
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Err(err) = cache.put(key, &response) {
                log::warn!("response cache write failed: {err}");
            }
        }
        Ok(response)
    }

    /// Drops any cached reply for `request`, e.g. after it failed to parse.
    pub fn evict(&self, request: &ChatRequest) {
        if let Some(cache) = &self.cache {
            cache.remove(&request.cache_key());
        }
    }

    fn call_with_retries(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let mut retries = 0u32;
        loop {
            let outcome = {
                let _permit = self.limiter.acquire();
                self.backend.call(request)
            };
            match outcome {
                Ok(mut response) => {
                    if response.content.is_empty() && response.finish_reason == "stop" {
                        return Err(GatewayError::MalformedBackendReply("empty content".into()));
                    }
                    response.retries = retries;
                    return Ok(response);
                }
                Err(err) if err.is_transient() => {
                    if retries >= self.policy.max_retries {
                        return Err(GatewayError::ExhaustedRetries {
                            attempts: retries + 1,
                            last_error: err,
                        });
                    }
                    let delay = self.policy.delay(retries);
                    log::debug!("transient failure ({err}); retrying in {delay:?}");
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    retries += 1;
                }
                Err(err) => return Err(GatewayError::permanent(err)),
            }
        }
    }

    /// Completes every request with at most `max_in_flight` outstanding at
    /// once. Results line up with `requests`; failures stay in their slot.
    pub fn complete_batch(
        &self,
        requests: &[ChatRequest],
        max_in_flight: usize,
    ) -> Vec<Result<ChatResponse, GatewayError>> {
        assert!(max_in_flight >= 1, "max_in_flight must be at least 1");
        exec::map_bounded(requests, max_in_flight, self.exec, |_, req| self.complete(req))
    }

    /// Runs `f` over `items` with the gateway's concurrency bound.
    pub fn for_each_bounded<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        exec::map_bounded(items, self.limiter.max, self.exec, f)
    }
}
