//! Sentence encoders and cosine similarity.
//!
//! Two encoders sit behind [`Encoder`]: a deterministic hashed bag-of-words
//! ([`HashBowEncoder`]) and an HTTP client for an out-of-process embedding
//! service ([`RemoteEncoder`]) speaking
//! `POST {"texts": [...]}` → `{"vectors": [[...], ...]}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BUILTIN_DIMENSION: usize = 256;
const HASH_SEED: u64 = 0x9E37_79B9_7F4A_7C15;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("encoder mismatch: {0} vs {1}")]
    EncoderMismatch(String, String),
    #[error("cosine is undefined for a zero vector")]
    ZeroVector,
    #[error("embedding service transport error: {0}")]
    Transport(String),
    #[error("embedding service broke its contract: {0}")]
    Contract(String),
    #[error("invalid encoder spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub encoder_id: String,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(encoder_id: impl Into<String>, values: Vec<f64>) -> Self {
        EmbeddingVector {
            encoder_id: encoder_id.into(),
            values,
        }
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    BuiltinHashBow,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub encoder_id: String,
    pub kind: EncoderKind,
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

impl EncoderSpec {
    pub fn builtin(encoder_id: impl Into<String>) -> Self {
        EncoderSpec {
            encoder_id: encoder_id.into(),
            kind: EncoderKind::BuiltinHashBow,
            dimension: BUILTIN_DIMENSION,
            endpoint: None,
        }
    }

    pub fn remote(encoder_id: impl Into<String>, endpoint: impl Into<String>, dimension: usize) -> Self {
        EncoderSpec {
            encoder_id: encoder_id.into(),
            kind: EncoderKind::Remote,
            dimension,
            endpoint: Some(endpoint.into()),
        }
    }

    /// Instantiates the encoder this spec describes.
    pub fn build(&self) -> Result<Box<dyn Encoder>, EmbedError> {
        if self.dimension == 0 {
            return Err(EmbedError::Spec("dimension must be positive".into()));
        }
        match self.kind {
            EncoderKind::BuiltinHashBow => Ok(Box::new(HashBowEncoder::with_dimension(
                &self.encoder_id,
                self.dimension,
            ))),
            EncoderKind::Remote => {
                let endpoint = self
                    .endpoint
                    .clone()
                    .ok_or_else(|| EmbedError::Spec("remote encoder requires an endpoint".into()))?;
                Ok(Box::new(RemoteEncoder::new(
                    &self.encoder_id,
                    endpoint,
                    self.dimension,
                )?))
            }
        }
    }
}

/// Anything that maps texts to fixed-dimension unit vectors.
pub trait Encoder: Send + Sync {
    fn id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn encode(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn encode_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut v = self.encode(&[text.to_string()])?;
        v.pop().ok_or_else(|| EmbedError::Contract("no vector returned".into()))
    }
}

/// Signed feature hashing over lowercase whitespace tokens.
#[derive(Debug, Clone)]
pub struct HashBowEncoder {
    id: String,
    dimension: usize,
}

impl HashBowEncoder {
    pub fn new(id: impl Into<String>) -> Self {
        Self::with_dimension(id, BUILTIN_DIMENSION)
    }

    pub fn with_dimension(id: impl Into<String>, dimension: usize) -> Self {
        assert!(dimension > 0);
        HashBowEncoder {
            id: id.into(),
            dimension,
        }
    }

    pub fn embed(&self, text: &str) -> EmbeddingVector {
        let mut values = vec![0.0; self.dimension];
        for token in text.split_whitespace() {
            let h = token_hash(&token.to_lowercase());
            let bucket = (h % self.dimension as u64) as usize;
            values[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // nothing survived (or everything cancelled): reserved basis vector
            values[0] = 1.0;
        } else {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector::new(self.id.clone(), values)
    }
}

impl Encoder for HashBowEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }
}

/// Seeded FNV-1a followed by the splitmix64 finalizer.
pub fn token_hash(token: &str) -> u64 {
    let mut h = FNV_OFFSET ^ HASH_SEED;
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    let mut z = h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EncodeResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for an external embedding service.
pub struct RemoteEncoder {
    id: String,
    endpoint: String,
    dimension: usize,
    client: reqwest::blocking::Client,
}

impl RemoteEncoder {
    pub fn new(id: impl Into<String>, endpoint: impl Into<String>, dimension: usize) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        Ok(RemoteEncoder {
            id: id.into(),
            endpoint: endpoint.into(),
            dimension,
            client,
        })
    }
}

impl Encoder for RemoteEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&EncodeRequest { texts })
            .send()
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EmbedError::Transport(format!("HTTP {}", resp.status())));
        }
        let body: EncodeResponse = resp
            .json()
            .map_err(|e| EmbedError::Contract(format!("bad response body: {e}")))?;
        if body.vectors.len() != texts.len() {
            return Err(EmbedError::Contract(format!(
                "expected {} vectors, got {}",
                texts.len(),
                body.vectors.len()
            )));
        }
        body.vectors
            .into_iter()
            .map(|mut values| {
                if values.len() != self.dimension {
                    return Err(EmbedError::Contract(format!(
                        "expected dimension {}, got {}",
                        self.dimension,
                        values.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(EmbedError::Contract("non-finite component".into()));
                }
                let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    values[0] = 1.0;
                } else {
                    values.iter_mut().for_each(|v| *v /= norm);
                }
                Ok(EmbeddingVector::new(self.id.clone(), values))
            })
            .collect()
    }
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.encoder_id != b.encoder_id {
        return Err(EmbedError::EncoderMismatch(a.encoder_id.clone(), b.encoder_id.clone()));
    }
    cosine_slices(&a.values, &b.values)
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}
