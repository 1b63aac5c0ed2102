//! Completion gateway over a remote chat-completion endpoint, scripted and
//! rule-based mock backends, and a content-addressed response cache.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::letter;
use crate::io::{self, IoError};
use crate::prompt::{Mode, PromptKind, PromptText};
use crate::ranking::derive_seed;

pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo-0301";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const API_KEY_ENV: &str = "KBQA_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model: String,
    pub temperature: f64,
    pub stop: Vec<String>,
    pub max_tokens: u32,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            model: DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            stop: vec!["]".to_string()],
            max_tokens: 256,
        }
    }
}

impl CompletionParams {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidParams(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.stop.iter().any(String::is_empty) {
            return Err(GatewayError::InvalidParams("empty stop string".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidParams("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Remote,
    Mock,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub prompt_hash: String,
    pub output_text: String,
    pub source: Source,
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("question `{qid}`: transport error after {attempts} attempt(s): {message}")]
    Transport {
        qid: String,
        attempts: u32,
        message: String,
    },
    #[error("question `{qid}`: protocol error: {message}")]
    Protocol { qid: String, message: String },
    #[error("question `{qid}`: {message}")]
    Backend { qid: String, message: String },
    #[error("empty prompt for question `{0}`")]
    EmptyPrompt(String),
    #[error("invalid completion parameters: {0}")]
    InvalidParams(String),
    #[error("missing API key: set {API_KEY_ENV}")]
    MissingApiKey,
    #[error("cache: {0}")]
    Cache(#[from] IoError),
}

/// Failure reported by a backend; the gateway decides whether to retry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    Retryable(String),
    Fatal(String),
    Protocol(String),
}

pub trait Backend: Send + Sync {
    /// Model identity folded into the cache key.
    fn identity(&self, params: &CompletionParams) -> String;
    fn source(&self) -> Source;
    fn generate(&self, prompt: &PromptText, params: &CompletionParams) -> Result<String, BackendError>;
}

/// Cuts `text` at the earliest occurrence of any stop string.
pub fn truncate_at_stop(text: &str, stops: &[String]) -> String {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].to_string()
}

#[derive(Serialize)]
struct HashKey<'a> {
    prompt: &'a str,
    model: &'a str,
    temperature: f64,
    stop: &'a [String],
    max_tokens: u32,
}

pub fn prompt_hash(prompt: &str, model: &str, params: &CompletionParams) -> String {
    let key = HashKey {
        prompt,
        model,
        temperature: params.temperature,
        stop: &params.stop,
        max_tokens: params.max_tokens,
    };
    io::sha256_hex(serde_json::to_string(&key).expect("hash key serializes").as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    prompt_hash: String,
    output_text: String,
}

/// One JSON file per prompt hash, written atomically.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.json"))
    }

    pub fn get(&self, hash: &str) -> Option<String> {
        let entry: CacheEntry = io::read_json(self.path(hash)).ok()?;
        (entry.prompt_hash == hash).then_some(entry.output_text)
    }

    pub fn put(&self, hash: &str, output: &str) -> Result<(), IoError> {
        io::write_json(
            self.path(hash),
            &CacheEntry {
                prompt_hash: hash.to_string(),
                output_text: output.to_string(),
            },
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Token bucket bounding dispatches per minute. A rate of 0 disables it.
#[derive(Debug)]
pub struct RateLimiter {
    per_min: u32,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(per_min: u32) -> Self {
        Self {
            per_min,
            state: Mutex::new((per_min as f64, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        if self.per_min == 0 {
            return;
        }
        let per_sec = self.per_min as f64 / 60.0;
        loop {
            let wait = {
                let mut st = self.state.lock().unwrap();
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * per_sec;
                st.0 = (st.0 + refill).min(self.per_min as f64);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - st.0) / per_sec)
            };
            thread::sleep(wait);
        }
    }
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    limiter: RateLimiter,
    dispatched: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        Self {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
            limiter: RateLimiter::new(0),
            dispatched: AtomicUsize::new(0),
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

    pub fn with_rate_limit(mut self, per_min: u32) -> Self {
        self.limiter = RateLimiter::new(per_min);
        self
    }

    /// Number of prompts sent to the backend (cache misses).
    pub fn dispatched(&self) -> usize {
        self.dispatched.load(Ordering::Relaxed)
    }

    pub fn identity(&self, params: &CompletionParams) -> String {
        self.backend.identity(params)
    }

    pub fn complete(
        &self,
        prompt: &PromptText,
        params: &CompletionParams,
    ) -> Result<CompletionRecord, GatewayError> {
        if prompt.text.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt(prompt.qid.clone()));
        }
        params.validate()?;
        let hash = prompt_hash(&prompt.text, &self.backend.identity(params), params);
        let started = Instant::now();
        if let Some(cached) = self.cache.as_ref().and_then(|c| c.get(&hash)) {
            return Ok(CompletionRecord {
                prompt_hash: hash,
                output_text: cached,
                source: Source::Cache,
                latency_ms: started.elapsed().as_millis() as u64,
            });
        }
        let raw = self.dispatch(prompt, params)?;
        let output = truncate_at_stop(&raw, &params.stop);
        if let Some(cache) = &self.cache {
            cache.put(&hash, &output)?;
        }
        Ok(CompletionRecord {
            prompt_hash: hash,
            output_text: output,
            source: self.backend.source(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn dispatch(&self, prompt: &PromptText, params: &CompletionParams) -> Result<String, GatewayError> {
        let mut attempt = 0u32;
        loop {
            if self.backend.source() == Source::Remote {
                self.limiter.acquire();
            }
            self.dispatched.fetch_add(1, Ordering::Relaxed);
            match self.backend.generate(prompt, params) {
                Ok(text) => return Ok(text),
                Err(BackendError::Retryable(msg)) if attempt < self.retry.max_retries => {
                    log::warn!("{}: {msg}; retrying", prompt.qid);
                    thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                Err(BackendError::Retryable(message)) | Err(BackendError::Fatal(message)) => {
                    return Err(GatewayError::Transport {
                        qid: prompt.qid.clone(),
                        attempts: attempt + 1,
                        message,
                    })
                }
                Err(BackendError::Protocol(message)) => {
                    return Err(GatewayError::Protocol {
                        qid: prompt.qid.clone(),
                        message,
                    })
                }
            }
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    stop: &'a [String],
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatContent,
}

#[derive(Deserialize)]
struct ChatContent {
    content: Option<String>,
}

/// Encodes the chat-completion request body.
pub fn chat_request_body(prompt: &str, params: &CompletionParams) -> String {
    serde_json::to_string(&ChatRequest {
        model: &params.model,
        messages: [ChatMessage {
            role: "user",
            content: prompt,
        }],
        temperature: params.temperature,
        stop: &params.stop,
        max_tokens: params.max_tokens,
    })
    .expect("request serializes")
}

/// Extracts `choices[0].message.content`.
pub fn parse_chat_response(body: &str) -> Result<String, BackendError> {
    let resp: ChatResponse =
        serde_json::from_str(body).map_err(|e| BackendError::Protocol(format!("bad response body: {e}")))?;
    resp.choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| BackendError::Protocol("response has no choices[0].message.content".into()))
}

pub struct RemoteBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.into(),
            api_key,
        }
    }

    /// Reads the key from [`API_KEY_ENV`].
    pub fn from_env(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, GatewayError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| GatewayError::MissingApiKey)?;
        Ok(Self::new(endpoint, Some(key), timeout))
    }
}

impl Backend for RemoteBackend {
    fn identity(&self, params: &CompletionParams) -> String {
        params.model.clone()
    }

    fn source(&self) -> Source {
        Source::Remote
    }

    fn generate(&self, prompt: &PromptText, params: &CompletionParams) -> Result<String, BackendError> {
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send(chat_request_body(&prompt.text, params))
            .map_err(|e| BackendError::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Retryable(format!("reading body: {e}")))?;
        match status {
            200..=299 => parse_chat_response(&body),
            429 | 500..=599 => Err(BackendError::Retryable(format!("HTTP {status}"))),
            _ => Err(BackendError::Fatal(format!("HTTP {status}: {}", body.trim()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Remote,
    Scripted,
    Oracle,
    Adversarial,
    Random,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Remote => "remote",
            BackendKind::Scripted => "scripted",
            BackendKind::Oracle => "oracle",
            BackendKind::Adversarial => "adversarial",
            BackendKind::Random => "random",
        })
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" => Ok(Self::Remote),
            "scripted" => Ok(Self::Scripted),
            "oracle" => Ok(Self::Oracle),
            "adversarial" => Ok(Self::Adversarial),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

/// Per-question option correctness used by the oracle and adversarial mocks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct OptionTable {
    correct: BTreeMap<String, Vec<bool>>,
}

impl OptionTable {
    pub fn insert(&mut self, qid: impl Into<String>, correct: Vec<bool>) {
        self.correct.insert(qid.into(), correct);
    }

    pub fn get(&self, qid: &str) -> Option<&[bool]> {
        self.correct.get(qid).map(Vec::as_slice)
    }

    fn digest(&self) -> String {
        io::sha256_hex(serde_json::to_string(self).unwrap().as_bytes())[..12].to_string()
    }
}

pub const REFUSAL: &str = "not provided in the options.";

fn mock_answer(mode: Mode, choice: Option<char>) -> String {
    match (mode, choice) {
        (Mode::Icl, Some(l)) => format!(" [{l}]"),
        (Mode::Icl, None) => format!(" {REFUSAL}"),
        (Mode::Cot, Some(l)) => format!(
            "\nStep 1: The main focus of the question is to identify what is asked.\n\
Step 2: The question specifies no additional constraint.\n\
Step 3: The answer is therefore [{l}]"
        ),
        (Mode::Cot, None) => "\nStep 1: The main focus of the question is to identify what is asked.\n\
Step 2: The question specifies no additional constraint.\n\
Step 3: The correct answer is not provided in the options."
            .to_string(),
    }
}

/// Offline backends for reproducible runs.
pub enum MockBackend {
    /// qid -> raw response text.
    Scripted {
        responses: HashMap<String, String>,
        digest: String,
    },
    /// Picks the first correct option.
    Oracle(OptionTable),
    /// Picks the first wrong option.
    Adversarial(OptionTable),
    /// Uniform option letter keyed on `(seed, prompt)`.
    Random { seed: u64 },
}

impl MockBackend {
    pub fn scripted(responses: HashMap<String, String>) -> Self {
        let sorted: BTreeMap<_, _> = responses.iter().collect();
        let digest = io::sha256_hex(serde_json::to_string(&sorted).unwrap().as_bytes())[..12].to_string();
        MockBackend::Scripted { responses, digest }
    }

    pub fn load_script(path: impl AsRef<Path>) -> Result<Self, IoError> {
        Ok(Self::scripted(io::read_json(path)?))
    }
}

impl Backend for MockBackend {
    fn identity(&self, _params: &CompletionParams) -> String {
        match self {
            MockBackend::Scripted { digest, .. } => format!("mock-scripted:{digest}"),
            MockBackend::Oracle(t) => format!("mock-oracle:{}", t.digest()),
            MockBackend::Adversarial(t) => format!("mock-adversarial:{}", t.digest()),
            MockBackend::Random { seed } => format!("mock-random:{seed}"),
        }
    }

    fn source(&self) -> Source {
        Source::Mock
    }

    fn generate(&self, prompt: &PromptText, _params: &CompletionParams) -> Result<String, BackendError> {
        if let MockBackend::Scripted { responses, .. } = self {
            if let Some(r) = responses.get(&prompt.qid) {
                return Ok(r.clone());
            }
            if !matches!(prompt.kind, PromptKind::Explanation { .. }) {
                return Err(BackendError::Fatal(format!("no scripted response for `{}`", prompt.qid)));
            }
        }
        if let PromptKind::Explanation { gold_letter } = prompt.kind {
            return Ok(mock_answer(Mode::Cot, Some(gold_letter)).trim_start().to_string());
        }
        let choice = match self {
            MockBackend::Oracle(table) | MockBackend::Adversarial(table) => {
                let want = matches!(self, MockBackend::Oracle(_));
                let correct = table
                    .get(&prompt.qid)
                    .ok_or_else(|| BackendError::Fatal(format!("no option table entry for `{}`", prompt.qid)))?;
                correct.iter().position(|&c| c == want).map(letter)
            }
            MockBackend::Random { seed } => {
                if prompt.n_options == 0 {
                    None
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(*seed, &[&prompt.qid, &prompt.text]));
                    Some(letter(rng.random_range(0..prompt.n_options)))
                }
            }
            MockBackend::Scripted { .. } => unreachable!(),
        };
        Ok(mock_answer(prompt.mode, choice))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn prompt(qid: &str, text: &str, n: usize) -> PromptText {
        PromptText {
            qid: qid.into(),
            mode: Mode::Icl,
            text: text.into(),
            n_options: n,
            kind: PromptKind::Entry,
        }
    }

    fn scripted(pairs: &[(&str, &str)]) -> Box<dyn Backend> {
        Box::new(MockBackend::scripted(
            pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        ))
    }

    #[test]
    fn scripted_answer_ends_with_letter() {
        let gw = Gateway::new(scripted(&[("q1", "the answer is therefore [A")]));
        let r = gw.complete(&prompt("q1", "p", 4), &CompletionParams::default()).unwrap();
        assert!(r.output_text.ends_with("[A"));
        assert_eq!(r.source, Source::Mock);
    }

    #[test]
    fn stop_truncation() {
        let gw = Gateway::new(scripted(&[("q1", "... [B] something after")]));
        let r = gw.complete(&prompt("q1", "p", 4), &CompletionParams::default()).unwrap();
        assert_eq!(r.output_text, "... [B");
        assert_eq!(truncate_at_stop("a]b]", &["]".into()]), "a");
        assert_eq!(truncate_at_stop("abc", &["x".into(), "b".into()]), "a");
        assert_eq!(truncate_at_stop("abc", &[]), "abc");
    }

    #[test]
    fn cache_hit_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let gw = Gateway::new(scripted(&[("q1", "x [C] y")])).with_cache(ResponseCache::new(dir.path()));
        let params = CompletionParams::default();
        let a = gw.complete(&prompt("q1", "p", 4), &params).unwrap();
        let b = gw.complete(&prompt("q1", "p", 4), &params).unwrap();
        assert_eq!(a.source, Source::Mock);
        assert_eq!(b.source, Source::Cache);
        assert_eq!(a.output_text, b.output_text);
        assert_eq!(a.prompt_hash, b.prompt_hash);
        assert_eq!(gw.dispatched(), 1);
    }

    #[test]
    fn hash_covers_all_params() {
        let base = CompletionParams::default();
        let h = prompt_hash("p", "m", &base);
        let variants = [
            CompletionParams { temperature: 0.5, ..base.clone() },
            CompletionParams { stop: vec!["\n".into()], ..base.clone() },
            CompletionParams { max_tokens: 10, ..base.clone() },
        ];
        for v in &variants {
            assert_ne!(prompt_hash("p", "m", v), h);
        }
        assert_ne!(prompt_hash("p", "m2", &base), h);
        assert_ne!(prompt_hash("p2", "m", &base), h);
    }

    #[test]
    fn invalid_params_and_empty_prompt() {
        let gw = Gateway::new(scripted(&[("q", "x")]));
        let bad = CompletionParams { temperature: -1.0, ..Default::default() };
        assert!(matches!(gw.complete(&prompt("q", "p", 1), &bad), Err(GatewayError::InvalidParams(_))));
        assert!(matches!(
            gw.complete(&prompt("q", "  ", 1), &CompletionParams::default()),
            Err(GatewayError::EmptyPrompt(_))
        ));
    }

    struct Flaky {
        failures: AtomicUsize,
        error: BackendError,
    }

    impl Backend for Flaky {
        fn identity(&self, _: &CompletionParams) -> String {
            "flaky".into()
        }
        fn source(&self) -> Source {
            Source::Remote
        }
        fn generate(&self, _: &PromptText, _: &CompletionParams) -> Result<String, BackendError> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                Err(self.error.clone())
            } else {
                Ok("ok [A]".into())
            }
        }
    }

    fn fast_retry(n: u32) -> RetryPolicy {
        RetryPolicy { max_retries: n, base_delay: Duration::from_millis(1), max_delay: Duration::from_millis(2) }
    }

    #[test]
    fn retries_then_succeeds() {
        let gw = Gateway::new(Box::new(Flaky { failures: AtomicUsize::new(2), error: BackendError::Retryable("503".into()) }))
            .with_retry(fast_retry(3));
        let r = gw.complete(&prompt("q", "p", 1), &CompletionParams::default()).unwrap();
        assert_eq!(r.output_text, "ok [A");
        assert_eq!(r.source, Source::Remote);
        assert_eq!(gw.dispatched(), 3);
    }

    #[test]
    fn retries_exhausted_carries_qid() {
        let gw = Gateway::new(Box::new(Flaky { failures: AtomicUsize::new(10), error: BackendError::Retryable("timeout".into()) }))
            .with_retry(fast_retry(2));
        match gw.complete(&prompt("q7", "p", 1), &CompletionParams::default()) {
            Err(GatewayError::Transport { qid, attempts, .. }) => {
                assert_eq!(qid, "q7");
                assert_eq!(attempts, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn protocol_errors_are_not_retried() {
        let gw = Gateway::new(Box::new(Flaky { failures: AtomicUsize::new(1), error: BackendError::Protocol("bad".into()) }))
            .with_retry(fast_retry(3));
        assert!(matches!(
            gw.complete(&prompt("q", "p", 1), &CompletionParams::default()),
            Err(GatewayError::Protocol { .. })
        ));
        assert_eq!(gw.dispatched(), 1);
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(0), Duration::from_millis(500));
        assert_eq!(p.delay(1), Duration::from_millis(1000));
        assert_eq!(p.delay(10), Duration::from_secs(8));
    }

    #[test]
    fn request_and_response_shapes() {
        let body = chat_request_body("hi", &CompletionParams::default());
        assert_eq!(
            body,
            r#"{"model":"gpt-3.5-turbo-0301","messages":[{"role":"user","content":"hi"}],"temperature":0.0,"stop":["]"],"max_tokens":256}"#
        );
        assert_eq!(
            parse_chat_response(r#"{"choices":[{"message":{"role":"assistant","content":"x [A"}}]}"#).unwrap(),
            "x [A"
        );
        assert!(matches!(parse_chat_response("{}"), Err(BackendError::Protocol(_))));
        assert!(matches!(parse_chat_response(r#"{"choices":[]}"#), Err(BackendError::Protocol(_))));
    }

    #[test]
    fn oracle_and_adversarial_choices() {
        let mut t = OptionTable::default();
        t.insert("q", vec![false, true, false, true]);
        t.insert("none", vec![false, false]);
        let params = CompletionParams::default();
        let oracle = Gateway::new(Box::new(MockBackend::Oracle(t.clone())));
        let adv = Gateway::new(Box::new(MockBackend::Adversarial(t)));
        assert_eq!(oracle.complete(&prompt("q", "p", 4), &params).unwrap().output_text, " [B");
        assert_eq!(adv.complete(&prompt("q", "p", 4), &params).unwrap().output_text, " [A");
        assert!(oracle.complete(&prompt("none", "p", 2), &params).unwrap().output_text.contains(REFUSAL));
        assert!(oracle.complete(&prompt("missing", "p", 2), &params).is_err());
    }

    #[test]
    fn random_mock_is_seeded() {
        let params = CompletionParams::default();
        let a = Gateway::new(Box::new(MockBackend::Random { seed: 3 }));
        let b = Gateway::new(Box::new(MockBackend::Random { seed: 3 }));
        for i in 0..10 {
            let p = prompt(&format!("q{i}"), "p", 3);
            let x = a.complete(&p, &params).unwrap().output_text;
            assert_eq!(x, b.complete(&p, &params).unwrap().output_text);
            assert!([" [A", " [B", " [C"].contains(&x.as_str()));
        }
    }

    #[test]
    fn mocks_do_not_share_cache_entries() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = OptionTable::default();
        t.insert("q", vec![false, true]);
        let params = CompletionParams::default();
        let o = Gateway::new(Box::new(MockBackend::Oracle(t.clone()))).with_cache(ResponseCache::new(dir.path()));
        let a = Gateway::new(Box::new(MockBackend::Adversarial(t))).with_cache(ResponseCache::new(dir.path()));
        assert_eq!(o.complete(&prompt("q", "p", 2), &params).unwrap().output_text, " [B");
        assert_eq!(a.complete(&prompt("q", "p", 2), &params).unwrap().output_text, " [A");
    }

    #[test]
    fn concurrent_cache_writers_agree() {
        let dir = tempfile::tempdir().unwrap();
        let gw = Arc::new(Gateway::new(scripted(&[("q", "same [D] tail")])).with_cache(ResponseCache::new(dir.path())));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let gw = Arc::clone(&gw);
                thread::spawn(move || gw.complete(&prompt("q", "p", 4), &CompletionParams::default()).unwrap())
            })
            .collect();
        let outs: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert!(outs.iter().all(|r| r.output_text == "same [D"));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn rate_limiter_unlimited_and_bucket() {
        let l = RateLimiter::new(0);
        for _ in 0..1000 {
            l.acquire();
        }
        let l = RateLimiter::new(6000);
        let t = Instant::now();
        for _ in 0..10 {
            l.acquire();
        }
        assert!(t.elapsed() < Duration::from_secs(1));
    }
}
