//! Text embedding behind a pluggable provider interface.
//!
//! Two providers ship with the engine: [`LocalHashProvider`], a deterministic
//! hashed bag-of-words embedder used for tests and offline runs, and
//! [`HttpEmbeddingProvider`], a client for the common embedding-service wire
//! shape (`POST {"model", "input": [...]}` returning indexed vectors). Every
//! provider output is L2-normalized so that inner product equals cosine
//! similarity; empty text maps to the zero vector.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::semaphore::Semaphore;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("provider `{provider}` transport failure: {detail}")]
    Transport { provider: String, detail: String },
    #[error("provider `{provider}` returned HTTP {status}")]
    HttpStatus { provider: String, status: u16 },
    #[error("provider `{provider}` contract violation: {detail}")]
    Contract { provider: String, detail: String },
    #[error("embedding cache error on {path}: {detail}")]
    Cache { path: String, detail: String },
}

/// Identity of an embedding model/provider; all vectors from one provider
/// share `dim`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProviderId {
    pub name: String,
    pub dim: usize,
}

impl ProviderId {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        ProviderId {
            name: name.into(),
            dim,
        }
    }
}

/// Fixed-length vector; unit L2 norm except the all-zero vector produced for
/// empty text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn norm(&self) -> f32 {
        self.values.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    /// Plain sequential inner product.
    pub fn dot(&self, other: &EmbeddingVector) -> f32 {
        let mut acc = 0.0f32;
        for (a, b) in self.values.iter().zip(&other.values) {
            acc += a * b;
        }
        acc
    }

    /// Scale to unit norm; the zero vector is left unchanged.
    pub fn normalize(&mut self) {
        let norm = self.norm();
        if norm > 0.0 {
            for v in &mut self.values {
                *v /= norm;
            }
        }
    }
}

/// A source of embeddings. Implementations must be deterministic per
/// configuration and safe to call from concurrent workers.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &ProviderId;

    /// Embed each text, order-preserving: output `i` embeds `texts[i]`.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

// ---------------------------------------------------------------------------
// Local deterministic provider
// ---------------------------------------------------------------------------

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// Seeded FNV-1a over the seed bytes followed by the token bytes.
fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in seed.to_le_bytes().iter().chain(bytes.iter()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hashed bag-of-words embedding: lowercase, split on non-alphanumerics,
/// hash each token into a bucket in `[0, dim)`, accumulate counts, then
/// L2-normalize. Empty text yields the zero vector.
pub fn local_embed(text: &str, dim: usize, seed: u64) -> EmbeddingVector {
    assert!(dim >= 8, "local embedding dim must be >= 8");
    let mut vec = EmbeddingVector::zeros(dim);
    for token in text.split(|c: char| !c.is_alphanumeric()) {
        if token.is_empty() {
            continue;
        }
        let bucket = hash_bucket(&token.to_lowercase(), dim, seed);
        vec.values[bucket] += 1.0;
    }
    vec.normalize();
    vec
}

/// Bucket assignment used by [`local_embed`]; exposed so tests can construct
/// texts with known (non-)collisions.
pub fn hash_bucket(token: &str, dim: usize, seed: u64) -> usize {
    (fnv1a64(seed, token.as_bytes()) % dim as u64) as usize
}

/// Deterministic in-process provider backed by [`local_embed`]. Stateless;
/// identical `(text, dim, seed)` always produce bit-identical vectors.
#[derive(Debug, Clone)]
pub struct LocalHashProvider {
    id: ProviderId,
    seed: u64,
}

impl LocalHashProvider {
    pub fn new(name: impl Into<String>, dim: usize, seed: u64) -> Result<Self, EmbeddingError> {
        let id = ProviderId::new(name, dim);
        if dim < 8 {
            return Err(EmbeddingError::Contract {
                provider: id.name,
                detail: format!("dim must be >= 8, got {dim}"),
            });
        }
        Ok(LocalHashProvider { id, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bucket(&self, token: &str) -> usize {
        hash_bucket(&token.to_lowercase(), self.id.dim, self.seed)
    }
}

impl EmbeddingProvider for LocalHashProvider {
    fn id(&self) -> &ProviderId {
        &self.id
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        Ok(texts
            .iter()
            .map(|t| local_embed(t, self.id.dim, self.seed))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Remote provider
// ---------------------------------------------------------------------------

/// Configuration for [`HttpEmbeddingProvider`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    /// Provider name used in indexes and caches.
    pub name: String,
    /// Expected vector dimension; responses that disagree are rejected.
    pub dim: usize,
    /// Full endpoint URL, e.g. `http://host:8080/v1/embeddings`.
    pub base_url: String,
    /// Model name sent in each request.
    pub model: String,
    /// Bearer token, if the service requires one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    /// Texts per request.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Maximum concurrent requests.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_batch_size() -> usize {
    32
}
fn default_timeout_secs() -> u64 {
    30
}
fn default_in_flight() -> usize {
    4
}

/// Default embedding model name for remote services.
pub const DEFAULT_EMBEDDING_MODEL: &str = "sentence-transformers/all-MiniLM-L12-v2";

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    index: usize,
    embedding: Vec<f32>,
}

/// Client for an embedding service speaking the de-facto JSON shape.
pub struct HttpEmbeddingProvider {
    id: ProviderId,
    config: HttpProviderConfig,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
}

impl HttpEmbeddingProvider {
    pub fn new(config: HttpProviderConfig) -> Result<Self, EmbeddingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| EmbeddingError::Transport {
                provider: config.name.clone(),
                detail: e.to_string(),
            })?;
        Ok(HttpEmbeddingProvider {
            id: ProviderId::new(config.name.clone(), config.dim),
            in_flight: Semaphore::new(config.max_in_flight),
            config,
            client,
        })
    }

    fn request_batch(&self, batch: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let provider = || self.id.name.clone();
        let _permit = self.in_flight.acquire();
        let mut req = self
            .client
            .post(&self.config.base_url)
            .json(&EmbedRequest {
                model: &self.config.model,
                input: batch,
            });
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| EmbeddingError::Transport {
            provider: provider(),
            detail: e.to_string(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(EmbeddingError::HttpStatus {
                provider: provider(),
                status: status.as_u16(),
            });
        }
        let parsed: EmbedResponse = resp.json().map_err(|e| EmbeddingError::Contract {
            provider: provider(),
            detail: format!("bad response body: {e}"),
        })?;
        if parsed.data.len() != batch.len() {
            return Err(EmbeddingError::Contract {
                provider: provider(),
                detail: format!(
                    "expected {} embeddings, got {}",
                    batch.len(),
                    parsed.data.len()
                ),
            });
        }
        let mut out = vec![None; batch.len()];
        for datum in parsed.data {
            if datum.index >= batch.len() {
                return Err(EmbeddingError::Contract {
                    provider: provider(),
                    detail: format!("response index {} out of range", datum.index),
                });
            }
            if datum.embedding.len() != self.id.dim {
                return Err(EmbeddingError::Contract {
                    provider: provider(),
                    detail: format!(
                        "dimension mismatch: expected {}, got {}",
                        self.id.dim,
                        datum.embedding.len()
                    ),
                });
            }
            let mut vec = EmbeddingVector {
                values: datum.embedding,
            };
            vec.normalize();
            out[datum.index] = Some(vec);
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| EmbeddingError::Contract {
                    provider: provider(),
                    detail: format!("response missing index {i}"),
                })
            })
            .collect()
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn id(&self) -> &ProviderId {
        &self.id
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        // Empty texts never reach the wire; they embed to the zero vector.
        let mut out: Vec<Option<EmbeddingVector>> = texts
            .iter()
            .map(|t| {
                t.trim()
                    .is_empty()
                    .then(|| EmbeddingVector::zeros(self.id.dim))
            })
            .collect();
        let pending: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        for group in pending.chunks(self.config.batch_size.max(1)) {
            let batch: Vec<&str> = group.iter().map(|&i| texts[i]).collect();
            let vecs = self.request_batch(&batch)?;
            for (&i, vec) in group.iter().zip(vecs) {
                out[i] = Some(vec);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("all slots filled")).collect())
    }
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 4] = b"FTEC";
const CACHE_VERSION: u32 = 1;

/// SHA-256 of the text bytes; cache keys pair this with the provider name.
pub fn content_hash(text: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher.finalize().into()
}

/// Append-only binary cache of embeddings keyed by (provider name, content
/// hash).
pub struct EmbeddingCache {
    path: PathBuf,
    entries: HashMap<(String, [u8; 32]), EmbeddingVector>,
    file: fs::File,
}

impl EmbeddingCache {
    /// Open or create a cache file, loading any existing entries.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, EmbeddingError> {
        let path = path.into();
        let err = |detail: String| EmbeddingError::Cache {
            path: path.display().to_string(),
            detail,
        };
        let mut entries = HashMap::new();
        let fresh = !path.exists();
        if !fresh {
            let bytes = fs::read(&path).map_err(|e| err(e.to_string()))?;
            let mut cursor = &bytes[..];
            let mut magic = [0u8; 4];
            cursor
                .read_exact(&mut magic)
                .map_err(|_| err("file too short".into()))?;
            if &magic != CACHE_MAGIC {
                return Err(err("bad magic".into()));
            }
            let mut v = [0u8; 4];
            cursor
                .read_exact(&mut v)
                .map_err(|_| err("file too short".into()))?;
            if u32::from_le_bytes(v) != CACHE_VERSION {
                return Err(err("unsupported cache version".into()));
            }
            while !cursor.is_empty() {
                let (key, vec) =
                    read_cache_record(&mut cursor).map_err(|e| err(format!("corrupt record: {e}")))?;
                entries.insert(key, vec);
            }
        }
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| err(e.to_string()))?;
        if fresh {
            file.write_all(CACHE_MAGIC).map_err(|e| err(e.to_string()))?;
            file.write_all(&CACHE_VERSION.to_le_bytes())
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(EmbeddingCache {
            path,
            entries,
            file,
        })
    }

    pub fn get(&self, provider: &str, text: &str) -> Option<&EmbeddingVector> {
        self.entries
            .get(&(provider.to_string(), content_hash(text)))
    }

    pub fn put(
        &mut self,
        provider: &str,
        text: &str,
        vec: EmbeddingVector,
    ) -> Result<(), EmbeddingError> {
        let key = (provider.to_string(), content_hash(text));
        if self.entries.contains_key(&key) {
            return Ok(());
        }
        let mut record = Vec::new();
        let name = provider.as_bytes();
        record.extend_from_slice(&(name.len() as u16).to_le_bytes());
        record.extend_from_slice(name);
        record.extend_from_slice(&key.1);
        record.extend_from_slice(&(vec.dim() as u32).to_le_bytes());
        for v in &vec.values {
            record.extend_from_slice(&v.to_le_bytes());
        }
        self.file
            .write_all(&record)
            .map_err(|e| EmbeddingError::Cache {
                path: self.path.display().to_string(),
                detail: e.to_string(),
            })?;
        self.entries.insert(key, vec);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn read_cache_record(
    cursor: &mut &[u8],
) -> Result<((String, [u8; 32]), EmbeddingVector), String> {
    let mut len_buf = [0u8; 2];
    cursor
        .read_exact(&mut len_buf)
        .map_err(|_| "truncated name length")?;
    let name_len = u16::from_le_bytes(len_buf) as usize;
    let mut name = vec![0u8; name_len];
    cursor.read_exact(&mut name).map_err(|_| "truncated name")?;
    let name = String::from_utf8(name).map_err(|_| "name not UTF-8")?;
    let mut hash = [0u8; 32];
    cursor.read_exact(&mut hash).map_err(|_| "truncated hash")?;
    let mut dim_buf = [0u8; 4];
    cursor
        .read_exact(&mut dim_buf)
        .map_err(|_| "truncated dim")?;
    let dim = u32::from_le_bytes(dim_buf) as usize;
    let mut values = Vec::with_capacity(dim);
    for _ in 0..dim {
        let mut f = [0u8; 4];
        cursor.read_exact(&mut f).map_err(|_| "truncated values")?;
        values.push(f32::from_le_bytes(f));
    }
    Ok(((name, hash), EmbeddingVector { values }))
}

/// Wraps a provider with a persistent [`EmbeddingCache`]; hits never reach
/// the inner provider.
pub struct CachedProvider {
    inner: Box<dyn EmbeddingProvider>,
    cache: Mutex<EmbeddingCache>,
}

impl CachedProvider {
    pub fn new(inner: Box<dyn EmbeddingProvider>, cache: EmbeddingCache) -> Self {
        CachedProvider {
            inner,
            cache: Mutex::new(cache),
        }
    }
}

impl EmbeddingProvider for CachedProvider {
    fn id(&self) -> &ProviderId {
        self.inner.id()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let mut cache = self.cache.lock().expect("cache poisoned");
        let provider = self.inner.id().name.clone();
        let mut out: Vec<Option<EmbeddingVector>> = texts
            .iter()
            .map(|t| cache.get(&provider, t).cloned())
            .collect();
        // Deduplicate misses so one text is embedded once per batch.
        let mut miss_texts: Vec<&str> = Vec::new();
        for (i, slot) in out.iter().enumerate() {
            if slot.is_none() && !miss_texts.contains(&texts[i]) {
                miss_texts.push(texts[i]);
            }
        }
        if !miss_texts.is_empty() {
            let vecs = self.inner.embed_batch(&miss_texts)?;
            for (text, vec) in miss_texts.iter().zip(vecs) {
                cache.put(&provider, text, vec)?;
            }
            for (i, slot) in out.iter_mut().enumerate() {
                if slot.is_none() {
                    *slot = cache.get(&provider, texts[i]).cloned();
                }
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}
