//! Text embedders used for feature explanations, concept queries and
//! segment texts.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm};

pub trait TextEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Whether the same text always yields the same vector.
    fn is_deterministic(&self) -> bool;
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>>;
}

/// Embeds `text`, rejecting empty input and checking the returned vector.
pub fn embed_text(embedder: &dyn TextEmbedder, text: &str) -> Result<Vec<f32>> {
    if text.trim().is_empty() {
        return Err(Error::InvalidInput("cannot embed empty text".into()));
    }
    let v = embedder.embed_raw(text)?;
    if v.len() != embedder.dim() {
        return Err(Error::shape(
            format!("embedding from {}", embedder.name()),
            embedder.dim(),
            v.len(),
        ));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite(format!("embedding from {}", embedder.name())));
    }
    Ok(v)
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine operand", a.len(), b.len()));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("cosine similarity of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn fnv1a(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for part in parts {
        for b in *part {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic offline embedder: hashes lowercase word unigrams and
/// boundary-marked character trigrams into a signed bag of features, then
/// L2-normalizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashingEmbedder {
    pub dim: usize,
    pub seed: u64,
}

pub const HASHING_EMBEDDER_NAME: &str = "hashing-ngram-v1";
pub const DEFAULT_EMBED_DIM: usize = 256;

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder {
            dim: DEFAULT_EMBED_DIM,
            seed: 0x5AE_A71A5,
        }
    }
}

impl HashingEmbedder {
    const WORD_WEIGHT: f32 = 1.0;
    const TRIGRAM_WEIGHT: f32 = 0.5;

    fn add(&self, v: &mut [f32], kind: &[u8], feature: &[u8], weight: f32) {
        let h = fnv1a(self.seed, &[kind, feature]);
        let idx = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[idx] += sign * weight;
    }
}

impl TextEmbedder for HashingEmbedder {
    fn name(&self) -> &str {
        HASHING_EMBEDDER_NAME
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f32>> {
        let mut v = vec![0.0f32; self.dim];
        let lower = text.to_lowercase();
        let mut words: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            // Punctuation-only text still gets a vector.
            words.push(lower.trim());
        }
        for w in words {
            self.add(&mut v, b"w", w.as_bytes(), Self::WORD_WEIGHT);
            let marked: Vec<char> = std::iter::once('#').chain(w.chars()).chain(std::iter::once('#')).collect();
            for tri in marked.windows(3) {
                let s: String = tri.iter().collect();
                self.add(&mut v, b"c", s.as_bytes(), Self::TRIGRAM_WEIGHT);
            }
        }
        let n = l2_norm(&v);
        if n == 0.0 {
            return Err(Error::InvalidInput(format!("text {text:?} hashed to a zero vector")));
        }
        v.iter_mut().for_each(|x| *x /= n);
        Ok(v)
    }
}

/// Configuration for an OpenAI-compatible `/embeddings` endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEmbedderConfig {
    /// Full URL of the embeddings endpoint.
    pub endpoint: String,
    pub model: String,
    pub dim: usize,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    30
}

pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a str,
    dimensions: usize,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

pub(crate) fn http_agent(timeout_secs: u64) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(timeout_secs)))
        .build()
        .into()
}

pub(crate) fn bearer(api_key_env: &Option<String>) -> Result<Option<String>> {
    match api_key_env {
        None => Ok(None),
        Some(var) => std::env::var(var)
            .map(|k| Some(format!("Bearer {k}")))
            .map_err(|_| Error::Remote(format!("environment variable {var} is not set"))),
    }
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Self {
        let agent = http_agent(config.timeout_secs);
        RemoteEmbedder { config, agent }
    }
}

impl TextEmbedder for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f32>> {
        let body = EmbeddingRequest {
            model: &self.config.model,
            input: text,
            dimensions: self.config.dim,
        };
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(auth) = bearer(&self.config.api_key_env)? {
            req = req.header("Authorization", &auth);
        }
        let resp: EmbeddingResponse = req
            .send_json(&body)
            .map_err(|e| Error::Remote(format!("embedding request failed: {e}")))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::Remote(format!("embedding response unreadable: {e}")))?;
        resp.data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| Error::Remote("embedding response had no data".into()))
    }
}
