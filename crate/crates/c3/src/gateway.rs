//! Chat-completion access: request hashing, OpenAI-compatible HTTP
//! backend with retry, content-addressed response cache, and a replay
//! backend for offline runs.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding_io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::System => 0,
            Role::User => 1,
            Role::Assistant => 2,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub image_ref: Option<String>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
            image_ref: None,
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
            image_ref: None,
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Free-form label for logs; not part of the request identity.
    pub request_tag: String,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest("no user message".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub content: String,
    pub backend_id: String,
    pub latency_ms: u64,
    pub cached: bool,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error after {} attempts: {}", attempts.len(), attempts.join("; "))]
    Transport { attempts: Vec<String> },
    #[error("request rejected with HTTP {status}: {body}")]
    Request { status: u16, body: String },
    #[error("replay miss: no scripted response for request {digest}")]
    ReplayMiss { digest: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("cache error at {path}: {msg}")]
    Cache { path: PathBuf, msg: String },
    #[error("no chat backend configured")]
    NoBackend,
}

/// SHA-256 over a length-prefixed encoding of the model id, temperature
/// bits, max_tokens, and every message's role, content and image
/// reference. The request tag is excluded.
pub fn request_hash(req: &ChatRequest) -> [u8; 32] {
    fn field(h: &mut Sha256, bytes: &[u8]) {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    let mut h = Sha256::new();
    h.update(b"c3-chat-request/v1");
    field(&mut h, req.model_id.as_bytes());
    // -0.0 and 0.0 are the same temperature
    let t = if req.temperature == 0.0 { 0.0 } else { req.temperature };
    h.update(t.to_bits().to_le_bytes());
    h.update(req.max_tokens.to_le_bytes());
    h.update((req.messages.len() as u64).to_le_bytes());
    for m in &req.messages {
        h.update([m.role.code()]);
        field(&mut h, m.content.as_bytes());
        match &m.image_ref {
            Some(img) => {
                h.update([1]);
                field(&mut h, img.as_bytes());
            }
            None => h.update([0]),
        }
    }
    h.finalize().into()
}

pub fn request_digest_hex(req: &ChatRequest) -> String {
    hex::encode(request_hash(req))
}

/// Outcome of a single backend attempt.
#[derive(Debug)]
pub enum SendError {
    /// Worth retrying (connection failure, 5xx).
    Retryable(String),
    Fatal(GatewayError),
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn send(&self, req: &ChatRequest) -> Result<String, SendError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `n + 1` after `n` failures (`n >= 1`).
    pub fn delay_after(&self, failures: u32) -> Duration {
        self.base_delay
            .mul_f64(self.factor.powi(failures.saturating_sub(1) as i32))
    }
}

/// OpenAI-compatible `POST {base_url}/chat/completions`.
pub struct HttpBackend {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    id: String,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<serde_json::Value>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Protocol(format!("http client: {e}")))?;
        let base_url = base_url.trim_end_matches('/').to_string();
        Ok(Self {
            id: format!("http:{base_url}"),
            base_url,
            api_key,
            client,
        })
    }

    fn wire_body<'a>(req: &'a ChatRequest) -> WireRequest<'a> {
        let messages = req
            .messages
            .iter()
            .map(|m| match &m.image_ref {
                None => serde_json::json!({"role": m.role.as_str(), "content": m.content}),
                Some(img) => serde_json::json!({
                    "role": m.role.as_str(),
                    "content": [
                        {"type": "text", "text": m.content},
                        {"type": "image_url", "image_url": {"url": img}},
                    ],
                }),
            })
            .collect();
        WireRequest {
            model: &req.model_id,
            messages,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        }
    }
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, req: &ChatRequest) -> Result<String, SendError> {
        let url = format!("{}/chat/completions", self.base_url);
        let mut builder = self.client.post(&url).json(&Self::wire_body(req));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .map_err(|e| SendError::Retryable(format!("{url}: {e}")))?;
        let status = resp.status();
        let body = resp
            .text()
            .map_err(|e| SendError::Retryable(format!("reading body: {e}")))?;
        if status.is_client_error() {
            return Err(SendError::Fatal(GatewayError::Request {
                status: status.as_u16(),
                body,
            }));
        }
        if !status.is_success() {
            return Err(SendError::Retryable(format!("HTTP {}: {body}", status.as_u16())));
        }
        let parsed: WireResponse = serde_json::from_str(&body)
            .map_err(|e| SendError::Fatal(GatewayError::Protocol(format!("{e}: {body}"))))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| SendError::Fatal(GatewayError::Protocol("no choices".into())))?;
        Ok(choice.message.content.unwrap_or_default())
    }
}

/// A replay script entry: one response, or a sequence served in order
/// (the last one repeats once the sequence is exhausted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReplayEntry {
    One(String),
    Many(Vec<String>),
}

pub type ReplayScript = BTreeMap<String, ReplayEntry>;

pub fn load_replay_script(path: &Path) -> Result<ReplayScript, GatewayError> {
    let text = fs::read_to_string(path).map_err(|e| GatewayError::Cache {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| GatewayError::Cache {
        path: path.to_path_buf(),
        msg: format!("invalid replay script: {e}"),
    })
}

/// Serves scripted responses keyed by request digest.
pub struct ReplayBackend {
    script: ReplayScript,
    cursors: Mutex<HashMap<String, usize>>,
}

impl ReplayBackend {
    pub fn new(script: ReplayScript) -> Self {
        Self {
            script,
            cursors: Mutex::new(HashMap::new()),
        }
    }
}

impl ChatBackend for ReplayBackend {
    fn id(&self) -> &str {
        "replay"
    }

    fn send(&self, req: &ChatRequest) -> Result<String, SendError> {
        let digest = request_digest_hex(req);
        match self.script.get(&digest) {
            None => Err(SendError::Fatal(GatewayError::ReplayMiss { digest })),
            Some(ReplayEntry::One(s)) => Ok(s.clone()),
            Some(ReplayEntry::Many(seq)) if seq.is_empty() => {
                Err(SendError::Fatal(GatewayError::ReplayMiss { digest }))
            }
            Some(ReplayEntry::Many(seq)) => {
                let mut cursors = self.cursors.lock().unwrap();
                let i = cursors.entry(digest).or_insert(0);
                let out = seq[(*i).min(seq.len() - 1)].clone();
                *i += 1;
                Ok(out)
            }
        }
    }
}

/// Passes requests to an inner backend and records every reply by digest.
pub struct RecordingBackend<B> {
    inner: B,
    recorded: Mutex<BTreeMap<String, Vec<String>>>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    /// The recordings as a replay script; digests answered identically
    /// every time collapse to a single string.
    pub fn script(&self) -> ReplayScript {
        self.recorded
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| {
                let entry = if v.iter().all(|s| s == &v[0]) {
                    ReplayEntry::One(v[0].clone())
                } else {
                    ReplayEntry::Many(v.clone())
                };
                (k.clone(), entry)
            })
            .collect()
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn send(&self, req: &ChatRequest) -> Result<String, SendError> {
        let out = self.inner.send(req)?;
        self.recorded
            .lock()
            .unwrap()
            .entry(request_digest_hex(req))
            .or_default()
            .push(out.clone());
        Ok(out)
    }
}

/// Backend computing each reply with a function of the request; used for
/// synthetic fixtures and tests.
pub struct FnBackend<F> {
    id: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&ChatRequest) -> String + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        Self { id: id.into(), f }
    }
}

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> String + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, req: &ChatRequest) -> Result<String, SendError> {
        Ok((self.f)(req))
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn send(&self, req: &ChatRequest) -> Result<String, SendError> {
        (**self).send(req)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    content: String,
    backend_id: String,
}

/// Content-addressed response cache: one `<digest>.json` per request.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    fn get(&self, digest: &str) -> Result<Option<CacheEntry>, GatewayError> {
        let path = self.path(digest);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| GatewayError::Cache {
                path,
                msg: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(GatewayError::Cache {
                path,
                msg: e.to_string(),
            }),
        }
    }

    fn put(&self, digest: &str, entry: &CacheEntry) -> Result<(), GatewayError> {
        let path = self.path(digest);
        let bytes = serde_json::to_vec(entry).expect("cache entry serializes");
        write_atomic(&path, &bytes).map_err(|e| GatewayError::Cache {
            path,
            msg: e.to_string(),
        })
    }
}

/// Anything that answers chat requests.
pub trait Chat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

/// Backend plus cache plus retry.
pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
}

impl Gateway {
    pub fn new(backend: Box<dyn ChatBackend>) -> Self {
        Self {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let digest = request_digest_hex(req);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&digest)? {
                return Ok(ChatResponse {
                    content: hit.content,
                    backend_id: hit.backend_id,
                    latency_ms: 0,
                    cached: true,
                });
            }
        }
        let started = Instant::now();
        let mut attempts = Vec::new();
        let content = loop {
            match self.backend.send(req) {
                Ok(c) => break c,
                Err(SendError::Fatal(e)) => return Err(e),
                Err(SendError::Retryable(msg)) => {
                    attempts.push(format!("attempt {}: {msg}", attempts.len() + 1));
                    if attempts.len() as u32 >= self.retry.max_attempts {
                        return Err(GatewayError::Transport { attempts });
                    }
                    let delay = self.retry.delay_after(attempts.len() as u32);
                    log::warn!("{} failed, retrying in {delay:?}: {msg}", req.request_tag);
                    std::thread::sleep(delay);
                }
            }
        };
        if let Some(cache) = &self.cache {
            cache.put(
                &digest,
                &CacheEntry {
                    content: content.clone(),
                    backend_id: self.backend.id().to_string(),
                },
            )?;
        }
        Ok(ChatResponse {
            content,
            backend_id: self.backend.id().to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
            cached: false,
        })
    }
}

impl Chat for Gateway {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.complete(req)
    }
}

/// One gateway call as seen by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub tag: String,
    pub digest: String,
    pub cached: bool,
}

/// Per-sample view of a [`Chat`] that logs every call in order.
pub struct CallLog<'a> {
    inner: &'a dyn Chat,
    calls: RefCell<Vec<CallRecord>>,
}

impl<'a> CallLog<'a> {
    pub fn new(inner: &'a dyn Chat) -> Self {
        Self {
            inner,
            calls: RefCell::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.borrow().clone()
    }

    pub fn into_calls(self) -> Vec<CallRecord> {
        self.calls.into_inner()
    }
}

impl Chat for CallLog<'_> {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let resp = self.inner.chat(req)?;
        self.calls.borrow_mut().push(CallRecord {
            tag: req.request_tag.clone(),
            digest: request_digest_hex(req),
            cached: resp.cached,
        });
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(content: &str) -> ChatRequest {
        ChatRequest {
            model_id: "vlm".into(),
            messages: vec![ChatMessage::system("sys"), ChatMessage::user(content)],
            temperature: 0.0,
            max_tokens: 64,
            request_tag: "t".into(),
        }
    }

    #[test]
    fn hash_sensitivity() {
        let a = req("hello");
        assert_eq!(request_hash(&a), request_hash(&a.clone()));
        let mut b = a.clone();
        b.temperature = 0.1;
        assert_ne!(request_hash(&a), request_hash(&b));
        let mut c = a.clone();
        c.request_tag = "other".into();
        assert_eq!(request_hash(&a), request_hash(&c));
        let mut d = a.clone();
        d.max_tokens = 65;
        assert_ne!(request_hash(&a), request_hash(&d));
        let mut e = a.clone();
        e.messages[0].role = Role::Assistant;
        assert_ne!(request_hash(&a), request_hash(&e));
        let mut f = a.clone();
        f.messages[1].image_ref = Some("img.jpg".into());
        assert_ne!(request_hash(&a), request_hash(&f));
        let mut g = a.clone();
        g.model_id = "vlm2".into();
        assert_ne!(request_hash(&a), request_hash(&g));
        let mut h = a.clone();
        h.temperature = -0.0;
        assert_eq!(request_hash(&a), request_hash(&h));
    }

    #[test]
    fn hash_is_stable() {
        // pinned so that replay scripts stay valid across releases
        assert_eq!(request_digest_hex(&req("hello")), request_digest_hex(&req("hello")));
        assert_eq!(request_digest_hex(&req("hello")).len(), 64);
    }

    #[test]
    fn validation() {
        let mut r = req("x");
        r.messages.retain(|m| m.role != Role::User);
        assert!(matches!(r.validate(), Err(GatewayError::InvalidRequest(_))));
        let mut r = req("x");
        r.temperature = -1.0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn replay_hit_and_miss() {
        let r = req("is there a bottle?");
        let mut script = ReplayScript::new();
        script.insert(request_digest_hex(&r), ReplayEntry::One("yes".into()));
        let gw = Gateway::new(Box::new(ReplayBackend::new(script)));
        let resp = gw.complete(&r).unwrap();
        assert_eq!(resp.content, "yes");
        assert!(!resp.cached);
        let miss = gw.complete(&req("other")).unwrap_err();
        match miss {
            GatewayError::ReplayMiss { digest } => {
                assert_eq!(digest, request_digest_hex(&req("other")))
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn replay_sequences_advance() {
        let r = req("q");
        let mut script = ReplayScript::new();
        script.insert(
            request_digest_hex(&r),
            ReplayEntry::Many(vec!["no".into(), "yes".into()]),
        );
        let gw = Gateway::new(Box::new(ReplayBackend::new(script)));
        let got: Vec<_> = (0..3).map(|_| gw.complete(&r).unwrap().content).collect();
        assert_eq!(got, ["no", "yes", "yes"]);
    }

    #[test]
    fn replay_script_json_shape() {
        let text = r#"{"ab": "yes", "cd": ["no", "yes"]}"#;
        let s: ReplayScript = serde_json::from_str(text).unwrap();
        assert_eq!(s["ab"], ReplayEntry::One("yes".into()));
        assert_eq!(s["cd"], ReplayEntry::Many(vec!["no".into(), "yes".into()]));
    }

    #[test]
    fn cache_marks_second_call() {
        let dir = tempfile::tempdir().unwrap();
        let r = req("cached?");
        let mut script = ReplayScript::new();
        script.insert(request_digest_hex(&r), ReplayEntry::One("sure".into()));
        let gw = Gateway::new(Box::new(ReplayBackend::new(script))).with_cache(ResponseCache::new(dir.path()));
        let first = gw.complete(&r).unwrap();
        let second = gw.complete(&r).unwrap();
        assert!(!first.cached);
        assert!(second.cached);
        assert_eq!(first.content, second.content);
        assert!(dir.path().join(format!("{}.json", request_digest_hex(&r))).exists());
    }

    struct Flaky {
        fail_times: Mutex<u32>,
        fatal: bool,
    }

    impl ChatBackend for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }
        fn send(&self, _: &ChatRequest) -> Result<String, SendError> {
            if self.fatal {
                return Err(SendError::Fatal(GatewayError::Request {
                    status: 400,
                    body: "bad".into(),
                }));
            }
            let mut n = self.fail_times.lock().unwrap();
            if *n > 0 {
                *n -= 1;
                Err(SendError::Retryable("down".into()))
            } else {
                Ok("up".into())
            }
        }
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            base_delay: Duration::from_millis(1),
            ..RetryPolicy::default()
        }
    }

    #[test]
    fn retries_then_succeeds() {
        let gw = Gateway::new(Box::new(Flaky {
            fail_times: Mutex::new(4),
            fatal: false,
        }))
        .with_retry(fast());
        assert_eq!(gw.complete(&req("x")).unwrap().content, "up");
    }

    #[test]
    fn gives_up_after_five_attempts() {
        let gw = Gateway::new(Box::new(Flaky {
            fail_times: Mutex::new(5),
            fatal: false,
        }))
        .with_retry(fast());
        match gw.complete(&req("x")).unwrap_err() {
            GatewayError::Transport { attempts } => assert_eq!(attempts.len(), 5),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let gw = Gateway::new(Box::new(Flaky {
            fail_times: Mutex::new(0),
            fatal: true,
        }))
        .with_retry(fast());
        assert!(matches!(
            gw.complete(&req("x")),
            Err(GatewayError::Request { status: 400, .. })
        ));
    }

    #[test]
    fn backoff_schedule() {
        let p = RetryPolicy::default();
        let delays: Vec<_> = (1..=4).map(|n| p.delay_after(n).as_secs()).collect();
        assert_eq!(delays, [1, 2, 4, 8]);
    }

    #[test]
    fn recording_collapses_constant_replies() {
        let rec = RecordingBackend::new(Flaky {
            fail_times: Mutex::new(0),
            fatal: false,
        });
        rec.send(&req("a")).unwrap();
        rec.send(&req("a")).unwrap();
        let script = rec.script();
        assert_eq!(script.len(), 1);
        assert_eq!(script[&request_digest_hex(&req("a"))], ReplayEntry::One("up".into()));
    }

    #[test]
    fn call_log_records_in_order() {
        let mut script = ReplayScript::new();
        for q in ["a", "b"] {
            script.insert(request_digest_hex(&req(q)), ReplayEntry::One(q.into()));
        }
        let gw = Gateway::new(Box::new(ReplayBackend::new(script)));
        let log = CallLog::new(&gw);
        let mut ra = req("a");
        ra.request_tag = "first".into();
        log.chat(&ra).unwrap();
        log.chat(&req("b")).unwrap();
        let calls = log.into_calls();
        assert_eq!(calls.len(), 2);
        assert_eq!(calls[0].tag, "first");
        assert_eq!(calls[1].digest, request_digest_hex(&req("b")));
    }
}
