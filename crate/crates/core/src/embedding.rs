//! Image and text embeddings, the cosine similarity kernel, and a
//! content-addressed on-disk cache.
//!
//! Two provider kinds exist:
//!
//! * `precomputed_file` — a JSON file `{"provider_id", "dimension", "vectors": {sha256: [..]}}`
//!   keyed by the SHA-256 of the image bytes or of the UTF-8 text.
//! * `http_endpoint` — `POST {"kind": "image"|"text", "payload": base64-or-text}`
//!   answered by `{"vector": [..], "dimension": n}`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;
use crate::transport::{HttpTransport, TransportError};

pub const DEFAULT_DIMENSION: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Image,
    Text,
}

impl SourceKind {
    fn as_str(self) -> &'static str {
        match self {
            SourceKind::Image => "image",
            SourceKind::Text => "text",
        }
    }
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding provider unreachable: {0}")]
    ProviderUnreachable(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("precomputed file has no vector for key {0}")]
    MissingPrecomputedKey(String),
    #[error("text to embed is empty")]
    EmptyText,
    #[error("cannot read image {path}: {source}")]
    UnreadableImage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("vector has zero norm")]
    ZeroNormVector,
    #[error("vector contains a non-finite value")]
    NonFiniteValue,
    #[error("vector is empty")]
    EmptyVector,
    #[error("invalid provider response: {0}")]
    InvalidResponse(String),
    #[error("precomputed file {path}: {message}")]
    PrecomputedFile { path: PathBuf, message: String },
    #[error("embedding cache I/O: {0}")]
    Cache(#[from] std::io::Error),
}

/// A validated embedding: finite entries, positive norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    pub source_kind: SourceKind,
    pub provider_id: String,
}

impl EmbeddingVector {
    pub fn new(
        values: Vec<f64>,
        source_kind: SourceKind,
        provider_id: impl Into<String>,
    ) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFiniteValue);
        }
        if norm(&values) == 0.0 {
            return Err(EmbeddingError::ZeroNormVector);
        }
        Ok(Self {
            values,
            source_kind,
            provider_id: provider_id.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

fn norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine of the angle between two embeddings, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    cosine_slices(a.values(), b.values())
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroNormVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub id: String,
    pub similarity: f64,
}

/// Orders candidates by descending cosine similarity to `query`; equal
/// similarities fall back to ascending id.
pub fn rank_by_similarity(
    query: &EmbeddingVector,
    candidates: &[(&str, &EmbeddingVector)],
) -> Result<Vec<Ranked>, EmbeddingError> {
    let mut ranked = candidates
        .iter()
        .map(|(id, v)| {
            cosine_similarity(query, v).map(|similarity| Ranked {
                id: (*id).to_string(),
                similarity,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    ranked.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.id.cmp(&b.id))
    });
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    PrecomputedFile,
    HttpEndpoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingProviderConfig {
    pub provider_id: String,
    pub kind: ProviderKind,
    pub endpoint_or_path: String,
    #[serde(default = "default_dimension")]
    pub expected_dimension: usize,
    #[serde(default = "default_embedding_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}

fn default_embedding_timeout_ms() -> u64 {
    30_000
}

/// On-disk format of a precomputed vector file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecomputedFile {
    pub provider_id: String,
    pub dimension: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl PrecomputedFile {
    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let text = std::fs::read_to_string(path).map_err(|e| EmbeddingError::PrecomputedFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| EmbeddingError::PrecomputedFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        let text = serde_json::to_string(self).map_err(|e| EmbeddingError::PrecomputedFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    kind: SourceKind,
    provider_id: String,
    values: Vec<f64>,
}

/// Content-addressed, append-only embedding cache. Each key is written once.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<String, EmbeddingVector>>,
    writer: Mutex<Option<File>>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a JSON-lines cache file.
    pub fn open(path: &Path) -> Result<Self, EmbeddingError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(l) => {
                        if let Ok(v) = EmbeddingVector::new(l.values, l.kind, l.provider_id) {
                            entries.entry(l.key).or_insert(v);
                        }
                    }
                    Err(e) => log::warn!("skipping malformed cache line in {}: {e}", path.display()),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn get(&self, key: &str) -> Option<EmbeddingVector> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores a vector unless the key is already present; returns the
    /// vector that ends up cached.
    pub fn insert(&self, key: &str, vector: EmbeddingVector) -> Result<EmbeddingVector, EmbeddingError> {
        let mut writer = self.writer.lock().unwrap();
        if let Some(existing) = self.get(key) {
            return Ok(existing);
        }
        if let Some(file) = writer.as_mut() {
            let line = CacheLine {
                key: key.to_string(),
                kind: vector.source_kind,
                provider_id: vector.provider_id.clone(),
                values: vector.values.clone(),
            };
            let mut text = serde_json::to_string(&line)
                .map_err(|e| EmbeddingError::InvalidResponse(e.to_string()))?;
            text.push('\n');
            file.write_all(text.as_bytes())?;
            file.flush()?;
        }
        self.entries
            .write()
            .unwrap()
            .insert(key.to_string(), vector.clone());
        Ok(vector)
    }
}

#[derive(Debug, Deserialize)]
struct EndpointReply {
    vector: Vec<f64>,
    dimension: usize,
}

/// Embeds images and texts through one configured provider, with caching.
pub struct Embedder {
    config: EmbeddingProviderConfig,
    precomputed: Option<PrecomputedFile>,
    transport: Arc<dyn HttpTransport>,
    cache: Arc<EmbeddingCache>,
    provider_calls: AtomicUsize,
}

impl Embedder {
    /// `base_dir` resolves a relative precomputed-file path.
    pub fn new(
        config: EmbeddingProviderConfig,
        base_dir: &Path,
        transport: Arc<dyn HttpTransport>,
        cache: Arc<EmbeddingCache>,
    ) -> Result<Self, EmbeddingError> {
        let precomputed = match config.kind {
            ProviderKind::PrecomputedFile => {
                let path = base_dir.join(&config.endpoint_or_path);
                let file = PrecomputedFile::load(&path)?;
                if file.dimension != config.expected_dimension {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: config.expected_dimension,
                        actual: file.dimension,
                    });
                }
                Some(file)
            }
            ProviderKind::HttpEndpoint => None,
        };
        Ok(Self {
            config,
            precomputed,
            transport,
            cache,
            provider_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &EmbeddingProviderConfig {
        &self.config
    }

    /// Number of lookups that went to the provider (cache misses).
    pub fn provider_calls(&self) -> usize {
        self.provider_calls.load(Ordering::SeqCst)
    }

    pub fn embed_image(&self, image: &Path) -> Result<EmbeddingVector, EmbeddingError> {
        let bytes = std::fs::read(image).map_err(|source| EmbeddingError::UnreadableImage {
            path: image.to_path_buf(),
            source,
        })?;
        let digest = sha256_hex(&bytes);
        self.embed(SourceKind::Image, &digest, || {
            serde_json::json!({
                "kind": "image",
                "payload": base64::engine::general_purpose::STANDARD.encode(&bytes),
            })
        })
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let digest = sha256_hex(text.as_bytes());
        self.embed(SourceKind::Text, &digest, || {
            serde_json::json!({ "kind": "text", "payload": text })
        })
    }

    fn embed(
        &self,
        kind: SourceKind,
        digest: &str,
        body: impl FnOnce() -> serde_json::Value,
    ) -> Result<EmbeddingVector, EmbeddingError> {
        let key = format!("{}/{}/{}", self.config.provider_id, kind.as_str(), digest);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        self.provider_calls.fetch_add(1, Ordering::SeqCst);
        let values = match &self.precomputed {
            Some(file) => file
                .vectors
                .get(digest)
                .cloned()
                .ok_or_else(|| EmbeddingError::MissingPrecomputedKey(digest.to_string()))?,
            None => self.fetch(body())?,
        };
        if values.len() != self.config.expected_dimension {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.config.expected_dimension,
                actual: values.len(),
            });
        }
        let vector = EmbeddingVector::new(values, kind, self.config.provider_id.clone())?;
        self.cache.insert(&key, vector)
    }

    fn fetch(&self, body: serde_json::Value) -> Result<Vec<f64>, EmbeddingError> {
        let reply = self
            .transport
            .post_json(
                &self.config.endpoint_or_path,
                &[],
                &body,
                Duration::from_millis(self.config.timeout_ms),
            )
            .map_err(|e: TransportError| EmbeddingError::ProviderUnreachable(e.to_string()))?;
        if !(200..300).contains(&reply.status) {
            return Err(EmbeddingError::ProviderUnreachable(format!(
                "status {}: {}",
                reply.status, reply.body
            )));
        }
        let parsed: EndpointReply = serde_json::from_str(&reply.body)
            .map_err(|e| EmbeddingError::InvalidResponse(e.to_string()))?;
        if parsed.dimension != parsed.vector.len() {
            return Err(EmbeddingError::InvalidResponse(format!(
                "declared dimension {} but vector has {} entries",
                parsed.dimension,
                parsed.vector.len()
            )));
        }
        Ok(parsed.vector)
    }

    /// Embeds many images with at most `parallelism` concurrent provider calls.
    /// Results keep the input order.
    pub fn embed_images(
        &self,
        images: &[PathBuf],
        parallelism: usize,
    ) -> Vec<Result<EmbeddingVector, EmbeddingError>> {
        let parallelism = parallelism.max(1).min(images.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<EmbeddingVector, EmbeddingError>>>> =
            images.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..parallelism {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= images.len() {
                        break;
                    }
                    *slots[i].lock().unwrap() = Some(self.embed_image(&images[i]));
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("every slot filled"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec(), SourceKind::Image, "t").unwrap()
    }

    #[test]
    fn identity_and_orthogonal() {
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0, 0.0]), &v(&[1.0, 0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_case() {
        // dot = 2 + 2 + 4 = 8, both norms = 3
        let s = cosine_similarity(&v(&[1.0, 2.0, 2.0]), &v(&[2.0, 1.0, 2.0])).unwrap();
        assert!((s - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_vectors() {
        assert!(matches!(
            EmbeddingVector::new(vec![0.0, 0.0], SourceKind::Text, "t"),
            Err(EmbeddingError::ZeroNormVector)
        ));
        assert!(matches!(
            EmbeddingVector::new(vec![f64::NAN], SourceKind::Text, "t"),
            Err(EmbeddingError::NonFiniteValue)
        ));
        assert!(matches!(
            cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0, 0.0])),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_slices(&[0.0, 0.0], &[1.0, 0.0]),
            Err(EmbeddingError::ZeroNormVector)
        ));
    }

    #[test]
    fn ranking_and_ties() {
        let q = v(&[1.0, 0.0]);
        let x = v(&[1.0, 0.0]);
        let y = v(&[0.0, 1.0]);
        let ranked = rank_by_similarity(&q, &[("y", &y), ("x", &x)]).unwrap();
        assert_eq!(ranked.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["x", "y"]);

        let a = v(&[1.0, 1.0]);
        let b = v(&[1.0, 1.0]);
        let ranked = rank_by_similarity(&q, &[("b", &b), ("a", &a)]).unwrap();
        assert_eq!(ranked.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    }
}
