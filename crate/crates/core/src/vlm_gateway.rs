//! Submission of assembled queries to VLM backends, with a record/replay
//! cassette so runs can be reproduced offline.
//!
//! Cassette file: JSON lines, one `{"fingerprint", "backend_id",
//! "raw_response", "recorded_at"}` object per line, append-only. The key is
//! [`submission_fingerprint`], which folds the backend's model name and
//! temperature into the query fingerprint.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{sha256_hex, sniff_image_mime};
use crate::metrics::QaRunItem;
use crate::prompt::{assemble_query, parse_response, PromptPart, QaQuery, QaResponse};
use crate::sample_store::{SampleDatabase, TestItem};
use crate::sampler::{IclSelection, SamplingStrategy};
use crate::transport::{HttpTransport, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    /// OpenAI-compatible `POST {base}/chat/completions` with image parts.
    ChatCompletionsVision,
    /// Ollama-style `POST {base}/api/generate` with a base64 image list.
    GenericGenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub backend_id: String,
    pub api_style: ApiStyle,
    pub base_url: String,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env_var: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_minute: Option<u32>,
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
}

fn default_max_output_tokens() -> u32 {
    2048
}
fn default_timeout_ms() -> u64 {
    120_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_parallelism() -> usize {
    1
}
fn default_backoff_ms() -> u64 {
    500
}

impl BackendConfig {
    pub fn new(
        backend_id: impl Into<String>,
        api_style: ApiStyle,
        base_url: impl Into<String>,
        model_name: impl Into<String>,
    ) -> Self {
        Self {
            backend_id: backend_id.into(),
            api_style,
            base_url: base_url.into(),
            model_name: model_name.into(),
            auth_env_var: None,
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            parallelism: default_parallelism(),
            requests_per_minute: None,
            retry_backoff_ms: default_backoff_ms(),
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cassette has no entry for fingerprint {0}")]
    CassetteMiss(String),
    #[error("backend timed out after {attempts} attempt(s)")]
    BackendTimeout { attempts: u32 },
    #[error("backend rejected request with status {status}: {body}")]
    BackendRejected { status: u16, body: String },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("environment variable `{0}` with the API key is not set")]
    AuthMissing(String),
    #[error("unexpected backend reply: {0}")]
    InvalidReply(String),
    #[error("cannot read image {path}: {source}")]
    UnreadableImage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cassette I/O: {0}")]
    CassetteIo(#[from] std::io::Error),
    #[error("invalid cassette line: {0}")]
    CassetteFormat(String),
}

impl GatewayError {
    /// Errors that stop a batch instead of being recorded per item.
    pub fn is_configuration_error(&self) -> bool {
        matches!(self, GatewayError::AuthMissing(_) | GatewayError::CassetteMiss(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CassetteMode {
    Record,
    Replay,
    Passthrough,
}

impl std::str::FromStr for CassetteMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "record" => Ok(CassetteMode::Record),
            "replay" => Ok(CassetteMode::Replay),
            "passthrough" => Ok(CassetteMode::Passthrough),
            other => Err(format!("unknown cassette mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub backend_id: String,
    pub raw_response: String,
    pub recorded_at: String,
}

#[derive(Debug)]
pub struct Cassette {
    mode: CassetteMode,
    entries: RwLock<BTreeMap<String, CassetteEntry>>,
    writer: Mutex<Option<File>>,
}

impl Cassette {
    pub fn in_memory(mode: CassetteMode) -> Self {
        Self {
            mode,
            entries: RwLock::new(BTreeMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Loads a cassette file. In record mode the file is created if absent
    /// and opened for appending; other modes only read it.
    pub fn open(path: &Path, mode: CassetteMode) -> Result<Self, GatewayError> {
        let mut entries = BTreeMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CassetteEntry = serde_json::from_str(&line)
                    .map_err(|e| GatewayError::CassetteFormat(format!("line {}: {e}", n + 1)))?;
                entries.entry(entry.fingerprint.clone()).or_insert(entry);
            }
        }
        let writer = if mode == CassetteMode::Record {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            Some(OpenOptions::new().create(true).append(true).open(path)?)
        } else {
            None
        };
        Ok(Self {
            mode,
            entries: RwLock::new(entries),
            writer: Mutex::new(writer),
        })
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    pub fn get(&self, fingerprint: &str) -> Option<CassetteEntry> {
        self.entries.read().unwrap().get(fingerprint).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends an entry unless the fingerprint is already recorded; returns
    /// the entry that is in the cassette afterwards.
    pub fn append(&self, entry: CassetteEntry) -> Result<CassetteEntry, GatewayError> {
        let mut writer = self.writer.lock().unwrap();
        if let Some(existing) = self.get(&entry.fingerprint) {
            return Ok(existing);
        }
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_string(&entry)
                .map_err(|e| GatewayError::CassetteFormat(e.to_string()))?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.entries
            .write()
            .unwrap()
            .insert(entry.fingerprint.clone(), entry.clone());
        Ok(entry)
    }
}

/// Cassette key: the query fingerprint bound to the model and temperature.
pub fn submission_fingerprint(query: &QaQuery, backend: &BackendConfig) -> String {
    let material = format!(
        "{}\n{}\n{:?}",
        query.fingerprint, backend.model_name, backend.temperature
    );
    sha256_hex(material.as_bytes())
}

/// Token bucket limiting requests per minute.
#[derive(Debug)]
pub struct TokenBucket {
    state: Mutex<(f64, Instant)>,
    capacity: f64,
    per_second: f64,
}

impl TokenBucket {
    pub fn per_minute(requests: u32) -> Self {
        let capacity = f64::from(requests.max(1));
        Self {
            state: Mutex::new((capacity, Instant::now())),
            capacity,
            per_second: capacity / 60.0,
        }
    }

    /// Takes one token without blocking.
    pub fn try_acquire(&self) -> bool {
        let mut state = self.state.lock().unwrap();
        self.refill(&mut state);
        if state.0 >= 1.0 {
            state.0 -= 1.0;
            true
        } else {
            false
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().unwrap();
                self.refill(&mut state);
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                (1.0 - state.0) / self.per_second
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }

    fn refill(&self, state: &mut (f64, Instant)) {
        let now = Instant::now();
        let elapsed = now.duration_since(state.1).as_secs_f64();
        state.0 = (state.0 + elapsed * self.per_second).min(self.capacity);
        state.1 = now;
    }
}

/// The serialized outcome of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRun {
    pub run_id: String,
    pub strategy: SamplingStrategy,
    pub backend_id: String,
    pub model_name: String,
    pub items: Vec<QaRunItem>,
}

impl QaRun {
    /// Canonical JSON (no timestamps), newline-terminated.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn item(&self, item_id: &str) -> Option<&QaRunItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }
}

/// Sends queries to backends. Network access happens only through the
/// transport handed in here.
pub struct Gateway {
    transport: Arc<dyn HttpTransport>,
    limiters: Mutex<HashMap<String, Arc<TokenBucket>>>,
    network_calls: AtomicUsize,
}

impl Gateway {
    pub fn new(transport: Arc<dyn HttpTransport>) -> Self {
        Self {
            transport,
            limiters: Mutex::new(HashMap::new()),
            network_calls: AtomicUsize::new(0),
        }
    }

    /// Requests handed to the transport, retries included.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn submit(
        &self,
        query: &QaQuery,
        backend: &BackendConfig,
        cassette: &Cassette,
    ) -> Result<String, GatewayError> {
        let key = submission_fingerprint(query, backend);
        match cassette.mode() {
            CassetteMode::Replay => cassette
                .get(&key)
                .map(|e| e.raw_response)
                .ok_or(GatewayError::CassetteMiss(key)),
            CassetteMode::Record => {
                if let Some(hit) = cassette.get(&key) {
                    return Ok(hit.raw_response);
                }
                let raw = self.call_backend(query, backend)?;
                let entry = cassette.append(CassetteEntry {
                    fingerprint: key,
                    backend_id: backend.backend_id.clone(),
                    raw_response: raw,
                    recorded_at: chrono::Utc::now().to_rfc3339(),
                })?;
                Ok(entry.raw_response)
            }
            CassetteMode::Passthrough => self.call_backend(query, backend),
        }
    }

    fn limiter(&self, backend: &BackendConfig) -> Option<Arc<TokenBucket>> {
        let rpm = backend.requests_per_minute?;
        let mut map = self.limiters.lock().unwrap();
        Some(
            map.entry(backend.backend_id.clone())
                .or_insert_with(|| Arc::new(TokenBucket::per_minute(rpm)))
                .clone(),
        )
    }

    fn call_backend(&self, query: &QaQuery, backend: &BackendConfig) -> Result<String, GatewayError> {
        let mut headers = Vec::new();
        if let Some(var) = &backend.auth_env_var {
            let key = std::env::var(var).map_err(|_| GatewayError::AuthMissing(var.clone()))?;
            headers.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        let (url, body) = build_request(query, backend)?;
        let timeout = Duration::from_millis(backend.timeout_ms);
        let limiter = self.limiter(backend);

        let mut attempt = 0u32;
        loop {
            if let Some(l) = &limiter {
                l.acquire();
            }
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let outcome = self.transport.post_json(&url, &headers, &body, timeout);
            let retryable = match outcome {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return extract_text(backend.api_style, &reply.body);
                }
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    GatewayError::BackendUnavailable(format!("status {}: {}", reply.status, reply.body))
                }
                Ok(reply) => {
                    return Err(GatewayError::BackendRejected {
                        status: reply.status,
                        body: reply.body,
                    })
                }
                Err(TransportError::Timeout) => GatewayError::BackendTimeout {
                    attempts: attempt + 1,
                },
                Err(TransportError::Refused) => {
                    return Err(GatewayError::BackendUnavailable(
                        TransportError::Refused.to_string(),
                    ))
                }
                Err(e @ TransportError::Connect(_)) => GatewayError::BackendUnavailable(e.to_string()),
            };
            if attempt >= backend.max_retries {
                return Err(retryable);
            }
            let backoff = backend.retry_backoff_ms.saturating_mul(1u64 << attempt.min(16));
            std::thread::sleep(Duration::from_millis(backoff));
            attempt += 1;
        }
    }

    /// Runs every item through assemble → submit → parse with
    /// `backend.parallelism` workers. Output order equals input order.
    /// Item-level failures become unparseable items carrying an error note;
    /// only configuration errors abort the batch.
    pub fn run_batch(
        &self,
        run_id: &str,
        strategy: &SamplingStrategy,
        items: &[(TestItem, IclSelection)],
        backend: &BackendConfig,
        cassette: &Cassette,
        db: &SampleDatabase,
    ) -> Result<QaRun, GatewayError> {
        let ctx = db.context();
        let rubric = &db.knowledge_base.points;
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let slots: Vec<Mutex<Option<Result<(String, QaResponse, Option<String>), GatewayError>>>> =
            items.iter().map(|_| Mutex::new(None)).collect();

        let workers = backend.parallelism.max(1).min(items.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    let (test_item, selection) = &items[i];
                    let image = db.resolve(&test_item.image_ref);
                    let result = match assemble_query(&ctx, selection, &image) {
                        Err(e) => Ok((String::new(), QaResponse::failed(String::new()), Some(e.to_string()))),
                        Ok(query) => match self.submit(&query, backend, cassette) {
                            Ok(raw) => Ok((query.fingerprint.clone(), parse_response(&raw, rubric), None)),
                            Err(e) if e.is_configuration_error() => {
                                abort.store(true, Ordering::SeqCst);
                                Err(e)
                            }
                            Err(e) => Ok((
                                query.fingerprint.clone(),
                                QaResponse::failed(String::new()),
                                Some(e.to_string()),
                            )),
                        },
                    };
                    *slots[i].lock().unwrap() = Some(result);
                });
            }
        });

        let mut run_items = Vec::with_capacity(items.len());
        for (slot, (test_item, selection)) in slots.into_iter().zip(items) {
            match slot.into_inner().unwrap() {
                Some(Ok((fingerprint, response, error))) => run_items.push(QaRunItem {
                    item_id: test_item.id.clone(),
                    strategy: selection.strategy.clone(),
                    backend_id: backend.backend_id.clone(),
                    selection: selection.clone(),
                    fingerprint,
                    response,
                    // attached only once the response is final
                    ground_truth: test_item.ground_truth,
                    error,
                }),
                Some(Err(e)) => return Err(e),
                None => {}
            }
        }
        if run_items.len() != items.len() {
            return Err(GatewayError::BackendUnavailable("batch aborted".into()));
        }
        Ok(QaRun {
            run_id: run_id.to_string(),
            strategy: strategy.clone(),
            backend_id: backend.backend_id.clone(),
            model_name: backend.model_name.clone(),
            items: run_items,
        })
    }
}

fn image_data(image: &crate::prompt::ImageRef) -> Result<(String, &'static str), GatewayError> {
    let bytes = std::fs::read(&image.path).map_err(|source| GatewayError::UnreadableImage {
        path: image.path.clone(),
        source,
    })?;
    let mime = sniff_image_mime(&bytes).unwrap_or("application/octet-stream");
    Ok((base64::engine::general_purpose::STANDARD.encode(bytes), mime))
}

/// Builds the wire request for one query in the backend's dialect.
pub fn build_request(
    query: &QaQuery,
    backend: &BackendConfig,
) -> Result<(String, serde_json::Value), GatewayError> {
    let base = backend.base_url.trim_end_matches('/');
    let parts = query.parts();
    match backend.api_style {
        ApiStyle::ChatCompletionsVision => {
            let mut content = Vec::new();
            // first part is the instruction; it goes in the system message
            for part in &parts[1..] {
                match part {
                    PromptPart::Text(t) => content.push(serde_json::json!({"type": "text", "text": t})),
                    PromptPart::Image(img) => {
                        let (b64, mime) = image_data(img)?;
                        content.push(serde_json::json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:{mime};base64,{b64}")},
                        }));
                    }
                }
            }
            let body = serde_json::json!({
                "model": backend.model_name,
                "temperature": backend.temperature,
                "max_tokens": backend.max_output_tokens,
                "messages": [
                    {"role": "system", "content": query.instruction},
                    {"role": "user", "content": content},
                ],
            });
            Ok((format!("{base}/chat/completions"), body))
        }
        ApiStyle::GenericGenerate => {
            let mut text = Vec::new();
            let mut images = Vec::new();
            for part in &parts {
                match part {
                    PromptPart::Text(t) => text.push(t.clone()),
                    PromptPart::Image(img) => {
                        images.push(image_data(img)?.0);
                        text.push(format!("[image {}]", images.len()));
                    }
                }
            }
            let body = serde_json::json!({
                "model": backend.model_name,
                "prompt": text.join("\n\n"),
                "images": images,
                "stream": false,
                "options": {
                    "temperature": backend.temperature,
                    "num_predict": backend.max_output_tokens,
                },
            });
            Ok((format!("{base}/api/generate"), body))
        }
    }
}

fn extract_text(style: ApiStyle, body: &str) -> Result<String, GatewayError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| GatewayError::InvalidReply(e.to_string()))?;
    let text = match style {
        ApiStyle::ChatCompletionsVision => {
            let content = &value["choices"][0]["message"]["content"];
            match content {
                serde_json::Value::String(s) => Some(s.clone()),
                serde_json::Value::Array(parts) => Some(
                    parts
                        .iter()
                        .filter_map(|p| p["text"].as_str())
                        .collect::<Vec<_>>()
                        .join(""),
                ),
                _ => None,
            }
        }
        ApiStyle::GenericGenerate => value["response"].as_str().map(str::to_string),
    };
    text.ok_or_else(|| GatewayError::InvalidReply(format!("no text in reply: {body}")))
}
