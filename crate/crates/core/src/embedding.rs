//! Embedding providers and cosine similarity.
//!
//! Two providers ship: [`HashEmbedder`], a deterministic bag-of-tokens
//! embedder used offline and in tests, and [`RemoteEmbedder`], a thin HTTP
//! adapter for hosted embedding services.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::word_tokens;

/// Seed mixed into the bucket hash of [`hash_embed`].
pub const HASH_BUCKET_SEED: u64 = 0x5eed_0000_0000_0001;
/// Seed mixed into the sign hash of [`hash_embed`].
pub const HASH_SIGN_SEED: u64 = 0x9e37_79b9_7f4a_7c15;
/// Smallest dimension accepted by [`hash_embed`].
pub const MIN_HASH_DIMENSION: usize = 8;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    /// Network or service failure; the call may be retried.
    #[error("embedding transport failure: {0}")]
    Transport(String),
    #[error("embedding service rejected the request: {0}")]
    Rejected(String),
    #[error("embedding dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding count mismatch: sent {sent} texts, got {received} vectors")]
    CountMismatch { sent: usize, received: usize },
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid embedding input: {0}")]
    InvalidInput(String),
    #[error("embedding contains non-finite values")]
    NonFinite,
}

impl EmbeddingError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbeddingError::Transport(_))
    }
}

/// A dense vector in the provider's embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn zeros(dimension: usize) -> Self {
        Embedding(vec![0.0; dimension])
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Maps text to fixed-dimension vectors.
///
/// Implementations must be deterministic for the vectors to be comparable
/// across index build and query time, and must tolerate concurrent calls.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    fn dimension(&self) -> usize;

    /// One vector per input text, in input order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError>;
}

/// Calls `provider` and checks the batch contract: non-empty inputs, one
/// finite vector per text, each of the provider's declared dimension.
pub fn embed_texts(
    provider: &dyn EmbeddingProvider,
    texts: &[&str],
) -> Result<Vec<Embedding>, EmbeddingError> {
    if texts.is_empty() {
        return Err(EmbeddingError::InvalidInput("empty batch".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(EmbeddingError::InvalidInput(format!("text {i} is empty")));
    }
    let vectors = provider.embed_batch(texts)?;
    if vectors.len() != texts.len() {
        return Err(EmbeddingError::CountMismatch {
            sent: texts.len(),
            received: vectors.len(),
        });
    }
    let expected = provider.dimension();
    for v in &vectors {
        if v.dimension() != expected {
            return Err(EmbeddingError::DimensionMismatch {
                expected,
                found: v.dimension(),
            });
        }
        if !v.is_finite() {
            return Err(EmbeddingError::NonFinite);
        }
    }
    Ok(vectors)
}

/// `u·v / (‖u‖‖v‖)`, or 0 when either vector is all zeros.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::LengthMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    // sqrt of the product keeps cos(u, u) at exactly 1.0
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// splitmix64 finalizer
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bucket index and sign that `token` contributes under [`hash_embed`].
pub fn hash_slot(token: &str, dimension: usize) -> (usize, f64) {
    let base = fnv1a(token.as_bytes());
    let bucket = (mix64(base ^ HASH_BUCKET_SEED) % dimension as u64) as usize;
    let sign = if mix64(base ^ HASH_SIGN_SEED) >> 63 == 0 {
        1.0
    } else {
        -1.0
    };
    (bucket, sign)
}

/// Deterministic bag-of-tokens embedding.
///
/// Tokens come from [`word_tokens`]; each adds ±1 to one bucket chosen by
/// [`hash_slot`], and the sum is L2-normalized. Text without tokens maps to
/// the zero vector.
///
/// # Panics
/// If `dimension` is below [`MIN_HASH_DIMENSION`].
pub fn hash_embed(text: &str, dimension: usize) -> Embedding {
    assert!(
        dimension >= MIN_HASH_DIMENSION,
        "hash embedding dimension must be at least {MIN_HASH_DIMENSION}"
    );
    let mut acc = vec![0.0; dimension];
    for token in word_tokens(text) {
        let (bucket, sign) = hash_slot(&token, dimension);
        acc[bucket] += sign;
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut acc {
            *v /= norm;
        }
    }
    Embedding(acc)
}

/// Offline provider backed by [`hash_embed`].
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
    name: String,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Result<Self, EmbeddingError> {
        if dimension < MIN_HASH_DIMENSION {
            return Err(EmbeddingError::InvalidInput(format!(
                "hash embedding dimension must be at least {MIN_HASH_DIMENSION}, got {dimension}"
            )));
        }
        Ok(Self {
            dimension,
            name: format!("hash-v1:{dimension}"),
        })
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
        Ok(texts.iter().map(|t| hash_embed(t, self.dimension)).collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// HTTP adapter: POSTs `{"texts": [...]}` and expects `{"vectors": [[...], ...]}`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    pub endpoint: String,
    pub token: Option<String>,
    pub dimension: usize,
    pub max_retries: usize,
    pub timeout: Duration,
    name: String,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, dimension: usize) -> Self {
        let endpoint = endpoint.into();
        Self {
            name: format!("remote:{endpoint}"),
            endpoint,
            token,
            dimension,
            max_retries: 2,
            timeout: Duration::from_secs(60),
        }
    }

    fn call(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut request = agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request
            .send_json(&EmbedRequest { texts })
            .map_err(|e| match e {
                ureq::Error::StatusCode(code) if (400..500).contains(&code) => {
                    EmbeddingError::Rejected(format!("HTTP {code}"))
                }
                other => EmbeddingError::Transport(other.to_string()),
            })?;
        let body: EmbedResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| EmbeddingError::Transport(format!("bad response body: {e}")))?;
        Ok(body.vectors.into_iter().map(Embedding).collect())
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
        let mut attempt = 0;
        loop {
            match self.call(texts) {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    attempt += 1;
                    tracing::warn!(error = %e, attempt, "retrying embedding request");
                    std::thread::sleep(Duration::from_millis(100 * attempt as u64));
                }
                Err(e) => return Err(e),
                Ok(vectors) => {
                    if let Some(v) = vectors.iter().find(|v| v.dimension() != self.dimension) {
                        return Err(EmbeddingError::DimensionMismatch {
                            expected: self.dimension,
                            found: v.dimension(),
                        });
                    }
                    return Ok(vectors);
                }
            }
        }
    }
}
