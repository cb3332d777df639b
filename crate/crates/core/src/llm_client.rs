//! Chat-completion transport plus deterministic offline backends.
//!
//! Five backends sit behind one blocking [`complete`] call:
//!
//! * `http` — POST to an OpenAI-compatible `/v1/chat/completions` endpoint
//!   with bounded in-flight requests, a token-bucket rate limit, and
//!   exponential-backoff retries. Every successful response is appended to a
//!   transcript keyed by prompt digest, turning one paid run into a permanent
//!   replay fixture.
//! * `replay` — serve responses from such a transcript; unknown digests are
//!   hard errors, never silent fallthrough.
//! * `oracle` — return a mapped clean text for the altered sentence found in
//!   the prompt (purification upper bound).
//! * `identity` — echo the altered sentence back (purification lower bound).
//! * `scripted` — table-driven responses and failures for tests.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{content_digest, extract_altered_sentence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// One chat-completion request. This artifact always sends exactly one user
/// message carrying the rendered prompt; the persona lives in the prompt body
/// itself, so no system message is used.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub model_name: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub timeout: Duration,
}

impl ChatRequest {
    pub fn user_prompt(model_name: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model_name: model_name.into(),
            messages: vec![ChatMessage {
                role: Role::User,
                content: prompt.into(),
            }],
            temperature: 0.0,
            timeout: Duration::from_secs(60),
        }
    }

    /// Content of the user message carrying the prompt.
    pub fn user_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct LlmResponse {
    pub raw_text: String,
    pub extracted_sentence: Option<String>,
    pub attempts: u32,
    pub latency: Duration,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("request has no user message")]
    NoUserMessage,
    #[error("API key environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("non-retryable HTTP status {status}: {body}")]
    NonRetryableStatus { status: u16, body: String },
    #[error("attempts exhausted after {attempts} tries: {last_error}")]
    AttemptsExhausted { attempts: u32, last_error: String },
    #[error("replay miss for digest {digest}")]
    ReplayMiss { digest: String },
    #[error("oracle has no clean text for the altered sentence: {altered}")]
    OracleMiss { altered: String },
    #[error("prompt carries no recognizable altered sentence")]
    NoAlteredSentence,
    #[error("scripted backend ran out of steps")]
    ScriptExhausted,
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Classified failures from [`extract_sentence`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("no JSON object found")]
    NoJsonObject,
    #[error("JSON object has no \"Original Sentence\" key")]
    MissingKey,
    #[error("\"Original Sentence\" value is empty")]
    EmptyValue,
    #[error("\"Original Sentence\" value is not a string")]
    NonStringValue,
}

const SENTENCE_KEY: &str = "Original Sentence";

/// Pull the purified sentence out of raw model output.
///
/// Finds the first well-formed JSON object in the text (prose and fenced code
/// blocks around it are fine), reads the exact key `"Original Sentence"`, and
/// returns the trimmed string value. Never panics on arbitrary input.
pub fn extract_sentence(raw: &str) -> Result<String, ExtractError> {
    extract_sentence_with(raw, false)
}

/// Like [`extract_sentence`]; `lenient` additionally accepts the key
/// case-insensitively (off by default everywhere).
pub fn extract_sentence_with(raw: &str, lenient: bool) -> Result<String, ExtractError> {
    for (idx, ch) in raw.char_indices() {
        if ch != '{' {
            continue;
        }
        let mut stream =
            serde_json::Deserializer::from_str(&raw[idx..]).into_iter::<serde_json::Value>();
        let value = match stream.next() {
            Some(Ok(v)) => v,
            _ => continue,
        };
        let serde_json::Value::Object(map) = value else {
            continue;
        };
        let entry = if lenient {
            map.iter()
                .find(|(k, _)| k.eq_ignore_ascii_case(SENTENCE_KEY))
                .map(|(_, v)| v)
        } else {
            map.get(SENTENCE_KEY)
        };
        let value = entry.ok_or(ExtractError::MissingKey)?;
        let text = value.as_str().ok_or(ExtractError::NonStringValue)?;
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(ExtractError::EmptyValue);
        }
        return Ok(trimmed.to_string());
    }
    Err(ExtractError::NoJsonObject)
}

/// Wrap a sentence in the JSON shape the prompt asks the model for.
pub fn wrap_original_sentence(sentence: &str) -> String {
    format!(
        "{{\"{SENTENCE_KEY}\": {}}}",
        serde_json::Value::String(sentence.to_string())
    )
}

/// Exponential backoff with a per-call jitter factor. The factor is drawn
/// once per request, so the delay sequence is nondecreasing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    /// Upper bound on the multiplicative jitter, e.g. 0.25 for up to +25%.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
            jitter: 0.25,
        }
    }
}

impl RetryPolicy {
    /// No waiting between attempts; for tests.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
            jitter: 0.0,
        }
    }

    /// Delay before retry number `attempt` (1-based: the delay after the
    /// attempt with that number failed), scaled by a fixed jitter factor.
    pub fn delay(&self, attempt: u32, jitter_factor: f64) -> Duration {
        let exp = attempt.saturating_sub(1).min(20);
        let raw = self.base_delay.saturating_mul(2u32.saturating_pow(exp));
        let capped = raw.min(self.max_delay);
        capped.mul_f64(1.0 + jitter_factor)
    }

    fn draw_jitter(&self) -> f64 {
        if self.jitter <= 0.0 {
            0.0
        } else {
            rand::thread_rng().gen_range(0.0..self.jitter)
        }
    }
}

enum SendOutcome {
    Ok(String),
    Retryable(String),
    Fatal(LlmError),
}

/// One scripted step for the test backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptStep {
    /// Return this raw text as the completion.
    Respond(String),
    /// Simulate an HTTP status (429/5xx retryable, other 4xx fatal).
    Status(u16),
    /// Simulate a timeout (retryable).
    Timeout,
}

#[derive(Debug, Deserialize)]
struct ScriptLine {
    #[serde(default)]
    altered: Option<String>,
    #[serde(default)]
    response: Option<String>,
    #[serde(default)]
    status: Option<u16>,
}

/// Table-driven backend for tests: steps keyed by the altered sentence parsed
/// from the prompt, falling back to a shared FIFO sequence, then to a
/// constant response.
#[derive(Debug)]
pub struct ScriptedBackend {
    keyed: Mutex<HashMap<String, Vec<ScriptStep>>>,
    sequence: Mutex<Vec<ScriptStep>>,
    constant: Option<String>,
    pub policy: RetryPolicy,
}

impl Default for ScriptedBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self {
            keyed: Mutex::new(HashMap::new()),
            sequence: Mutex::new(Vec::new()),
            constant: None,
            policy: RetryPolicy::immediate(5),
        }
    }

    /// Backend that answers every request with the same raw text.
    pub fn constant(raw: impl Into<String>) -> Self {
        Self {
            constant: Some(raw.into()),
            ..Self::new()
        }
    }

    pub fn push(&self, step: ScriptStep) {
        self.sequence.lock().unwrap().push(step);
    }

    pub fn push_for(&self, altered: impl Into<String>, step: ScriptStep) {
        self.keyed
            .lock()
            .unwrap()
            .entry(altered.into())
            .or_default()
            .push(step);
    }

    /// Load steps from JSONL: `{"altered": ..., "response": ...}` keys a
    /// step to one altered sentence; lines without `"altered"` join the
    /// shared sequence; `"status"` instead of `"response"` simulates an HTTP
    /// status.
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let file = std::fs::File::open(path).map_err(|e| LlmError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let backend = Self::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| LlmError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScriptLine = serde_json::from_str(&line)
                .map_err(|e| LlmError::MalformedResponse(format!("{path:?}: {e}")))?;
            let step = match (parsed.response, parsed.status) {
                (Some(r), _) => ScriptStep::Respond(r),
                (None, Some(s)) => ScriptStep::Status(s),
                (None, None) => {
                    return Err(LlmError::MalformedResponse(format!(
                        "{path:?}: line needs a response or a status"
                    )))
                }
            };
            match parsed.altered {
                Some(a) => backend.push_for(a, step),
                None => backend.push(step),
            }
        }
        Ok(backend)
    }

    fn next_step(&self, altered: Option<&str>) -> Result<ScriptStep, LlmError> {
        if let Some(key) = altered {
            let mut keyed = self.keyed.lock().unwrap();
            if let Some(steps) = keyed.get_mut(key) {
                if !steps.is_empty() {
                    return Ok(steps.remove(0));
                }
            }
        }
        let mut seq = self.sequence.lock().unwrap();
        if !seq.is_empty() {
            return Ok(seq.remove(0));
        }
        match &self.constant {
            Some(raw) => Ok(ScriptStep::Respond(raw.clone())),
            None => Err(LlmError::ScriptExhausted),
        }
    }
}

/// Replay transcript line: `{"digest": "...", "response": "..."}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub digest: String,
    pub response: String,
}

/// Serves previously captured responses keyed by prompt digest.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    entries: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, digest: impl Into<String>, response: impl Into<String>) {
        self.entries.insert(digest.into(), response.into());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load a transcript file; later entries for the same digest win.
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let file = std::fs::File::open(path).map_err(|e| LlmError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut backend = Self::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| LlmError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry = serde_json::from_str(&line)
                .map_err(|e| LlmError::MalformedResponse(format!("{path:?}: {e}")))?;
            backend.entries.insert(entry.digest, entry.response);
        }
        Ok(backend)
    }
}

/// Maps altered sentences to known clean texts.
#[derive(Debug, Default)]
pub struct OracleBackend {
    map: HashMap<String, String>,
}

impl OracleBackend {
    pub fn from_pairs<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        Self {
            map: pairs
                .into_iter()
                .map(|(a, b)| (a.into(), b.into()))
                .collect(),
        }
    }
}

/// Counting semaphore bounding in-flight HTTP requests.
#[derive(Debug)]
struct Gate {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Gate {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
    }

    fn release(&self) {
        *self.permits.lock().unwrap() += 1;
        self.available.notify_one();
    }
}

/// Token bucket: `rate` tokens per second up to `capacity`.
#[derive(Debug)]
struct TokenBucket {
    state: Mutex<(f64, Instant)>,
    rate: f64,
    capacity: f64,
}

impl TokenBucket {
    fn new(rate: f64, capacity: f64) -> Self {
        Self {
            state: Mutex::new((capacity, Instant::now())),
            rate,
            capacity,
        }
    }

    fn take(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().unwrap();
                let now = Instant::now();
                let elapsed = now.duration_since(state.1).as_secs_f64();
                state.0 = (state.0 + elapsed * self.rate).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                (1.0 - state.0) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait.min(1.0)));
        }
    }
}

/// Live OpenAI-compatible backend.
pub struct HttpBackend {
    pub base_url: String,
    pub api_key_env: String,
    pub policy: RetryPolicy,
    /// Transcript file that captures every successful response by digest.
    pub transcript_out: Option<PathBuf>,
    client: reqwest::blocking::Client,
    gate: Gate,
    bucket: TokenBucket,
    transcript_lock: Mutex<()>,
}

pub const API_KEY_ENV: &str = "PURIFY_LLM_API_KEY";
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
pub const DEFAULT_REQUESTS_PER_SECOND: f64 = 2.0;

impl HttpBackend {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key_env: API_KEY_ENV.to_string(),
            policy: RetryPolicy::default(),
            transcript_out: None,
            client: reqwest::blocking::Client::new(),
            gate: Gate::new(DEFAULT_MAX_IN_FLIGHT),
            bucket: TokenBucket::new(DEFAULT_REQUESTS_PER_SECOND, DEFAULT_MAX_IN_FLIGHT as f64),
            transcript_lock: Mutex::new(()),
        }
    }

    pub fn with_limits(mut self, max_in_flight: usize, requests_per_second: f64) -> Self {
        self.gate = Gate::new(max_in_flight);
        self.bucket = TokenBucket::new(requests_per_second.max(0.01), max_in_flight.max(1) as f64);
        self
    }

    pub fn with_transcript(mut self, path: PathBuf) -> Self {
        self.transcript_out = Some(path);
        self
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    fn api_key(&self) -> Result<String, LlmError> {
        std::env::var(&self.api_key_env)
            .map_err(|_| LlmError::MissingApiKey(self.api_key_env.clone()))
    }

    fn send_once(&self, request: &ChatRequest, api_key: &str) -> SendOutcome {
        self.bucket.take();
        let body = serde_json::json!({
            "model": request.model_name,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        let url = format!("{}/v1/chat/completions", self.base_url);
        let sent = self
            .client
            .post(&url)
            .bearer_auth(api_key)
            .json(&body)
            .timeout(request.timeout)
            .send();
        let response = match sent {
            Ok(r) => r,
            Err(e) if e.is_timeout() || e.is_connect() => {
                return SendOutcome::Retryable(e.to_string())
            }
            Err(e) => return SendOutcome::Fatal(LlmError::MalformedResponse(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = response.text().unwrap_or_default();
        if status == 429 || status >= 500 {
            return SendOutcome::Retryable(format!("HTTP {status}: {text}"));
        }
        if status >= 400 {
            return SendOutcome::Fatal(LlmError::NonRetryableStatus { status, body: text });
        }
        match parse_completion_body(&text) {
            Ok(content) => SendOutcome::Ok(content),
            Err(e) => SendOutcome::Fatal(e),
        }
    }

    fn capture(&self, digest: &str, response: &str) -> Result<(), LlmError> {
        let Some(path) = &self.transcript_out else {
            return Ok(());
        };
        let entry = TranscriptEntry {
            digest: digest.to_string(),
            response: response.to_string(),
        };
        let line = serde_json::to_string(&entry).expect("transcript entry serializes");
        let _guard = self.transcript_lock.lock().unwrap();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LlmError::Io {
                path: path.clone(),
                source: e,
            })?;
        writeln!(file, "{line}").map_err(|e| LlmError::Io {
            path: path.clone(),
            source: e,
        })
    }
}

fn parse_completion_body(body: &str) -> Result<String, LlmError> {
    #[derive(Deserialize)]
    struct Completion {
        choices: Vec<Choice>,
    }
    #[derive(Deserialize)]
    struct Choice {
        message: ChoiceMessage,
    }
    #[derive(Deserialize)]
    struct ChoiceMessage {
        content: String,
    }
    let completion: Completion = serde_json::from_str(body)
        .map_err(|e| LlmError::MalformedResponse(format!("completion body: {e}")))?;
    completion
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| LlmError::MalformedResponse("completion has no choices".into()))
}

/// A configured completion backend.
pub enum LlmBackend {
    Http(HttpBackend),
    Replay(ReplayBackend),
    Oracle(OracleBackend),
    Identity,
    Scripted(ScriptedBackend),
}

impl LlmBackend {
    pub fn kind(&self) -> &'static str {
        match self {
            LlmBackend::Http(_) => "http",
            LlmBackend::Replay(_) => "replay",
            LlmBackend::Oracle(_) => "oracle",
            LlmBackend::Identity => "identity",
            LlmBackend::Scripted(_) => "scripted",
        }
    }
}

/// Run one completion against any backend. Retryable failures (timeouts,
/// connection errors, HTTP 429/5xx) back off exponentially with jitter up to
/// the backend's attempt cap; everything else fails immediately.
pub fn complete(backend: &LlmBackend, request: &ChatRequest) -> Result<LlmResponse, LlmError> {
    let started = Instant::now();
    let prompt = request.user_content().ok_or(LlmError::NoUserMessage)?;

    let respond = |raw: String, attempts: u32| LlmResponse {
        extracted_sentence: extract_sentence(&raw).ok(),
        raw_text: raw,
        attempts,
        latency: started.elapsed(),
    };

    match backend {
        LlmBackend::Replay(replay) => {
            let digest = content_digest(prompt);
            match replay.entries.get(&digest) {
                Some(raw) => Ok(respond(raw.clone(), 1)),
                None => Err(LlmError::ReplayMiss { digest }),
            }
        }
        LlmBackend::Identity => {
            let altered =
                extract_altered_sentence(prompt).ok_or(LlmError::NoAlteredSentence)?;
            Ok(respond(wrap_original_sentence(altered), 1))
        }
        LlmBackend::Oracle(oracle) => {
            let altered =
                extract_altered_sentence(prompt).ok_or(LlmError::NoAlteredSentence)?;
            match oracle.map.get(altered) {
                Some(clean) => Ok(respond(wrap_original_sentence(clean), 1)),
                None => Err(LlmError::OracleMiss {
                    altered: altered.to_string(),
                }),
            }
        }
        LlmBackend::Scripted(scripted) => {
            let altered = extract_altered_sentence(prompt);
            let jitter = scripted.policy.draw_jitter();
            let mut attempts = 0u32;
            loop {
                attempts += 1;
                let outcome = match scripted.next_step(altered)? {
                    ScriptStep::Respond(raw) => SendOutcome::Ok(raw),
                    ScriptStep::Timeout => SendOutcome::Retryable("simulated timeout".into()),
                    ScriptStep::Status(s) if s == 429 || s >= 500 => {
                        SendOutcome::Retryable(format!("HTTP {s}"))
                    }
                    ScriptStep::Status(s) => SendOutcome::Fatal(LlmError::NonRetryableStatus {
                        status: s,
                        body: String::new(),
                    }),
                };
                match outcome {
                    SendOutcome::Ok(raw) => return Ok(respond(raw, attempts)),
                    SendOutcome::Fatal(e) => return Err(e),
                    SendOutcome::Retryable(last_error) => {
                        if attempts >= scripted.policy.max_attempts {
                            return Err(LlmError::AttemptsExhausted {
                                attempts,
                                last_error,
                            });
                        }
                        std::thread::sleep(scripted.policy.delay(attempts, jitter));
                    }
                }
            }
        }
        LlmBackend::Http(http) => {
            let api_key = http.api_key()?;
            let jitter = http.policy.draw_jitter();
            http.gate.acquire();
            let result = (|| {
                let mut attempts = 0u32;
                loop {
                    attempts += 1;
                    match http.send_once(request, &api_key) {
                        SendOutcome::Ok(raw) => {
                            http.capture(&content_digest(prompt), &raw)?;
                            return Ok(respond(raw, attempts));
                        }
                        SendOutcome::Fatal(e) => return Err(e),
                        SendOutcome::Retryable(last_error) => {
                            if attempts >= http.policy.max_attempts {
                                return Err(LlmError::AttemptsExhausted {
                                    attempts,
                                    last_error,
                                });
                            }
                            std::thread::sleep(http.policy.delay(attempts, jitter));
                        }
                    }
                }
            })();
            http.gate.release();
            result
        }
    }
}
