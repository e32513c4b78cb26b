//! Service interfaces for generation, embedding and entailment.
//!
//! Each service is a trait object shared across threads. Concrete backends
//! are the HTTP clients in [`http`] and the deterministic in-process mocks in
//! [`mock`]; [`build_generator`] and friends pick one from a
//! [`BackendDescriptor`] and wrap it in admission control.

pub mod admission;
pub mod cache;
pub mod http;
pub mod mock;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BackendDescriptor, BackendKind};

pub use admission::{Admission, Throttled};
pub use cache::CachedEntailer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request rejected with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("empty embedding batch")]
    EmptyBatch,
    #[error("batch of {got} exceeds the configured maximum of {max}")]
    BatchTooLarge { max: usize, got: usize },
    #[error("embedding dimension changed within a run: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend descriptor is for {found:?}, expected {expected:?}")]
    WrongKind { expected: BackendKind, found: BackendKind },
}

impl BackendError {
    /// Stable machine-readable code used in `failures.jsonl`.
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::Unavailable { .. } => "BackendUnavailable",
            BackendError::Auth(_) => "AuthError",
            BackendError::Rejected { .. } => "Rejected",
            BackendError::Malformed(_) => "ResponseMalformed",
            BackendError::EmptyBatch => "EmptyBatch",
            BackendError::BatchTooLarge { .. } => "BatchTooLarge",
            BackendError::DimMismatch { .. } => "DimMismatch",
            BackendError::InvalidRequest(_) => "InvalidRequest",
            BackendError::WrongKind { .. } => "WrongKind",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl GenerationRequest {
    /// Request with the default sampling settings: top-p 0.9, temperature
    /// 1.0, at most 2100 tokens.
    pub fn new(prompt: impl Into<String>, seed: u64) -> Self {
        GenerationRequest { prompt: prompt.into(), top_p: 0.9, temperature: 1.0, max_tokens: 2100, seed }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest(format!("top_p {} not in (0, 1]", self.top_p)));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// L2-normalized sentence embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Normalizes `values` to unit length. Fails on empty, zero or
    /// non-finite input.
    pub fn normalized(values: Vec<f64>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::Malformed("zero-length embedding".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(BackendError::Malformed("embedding has zero or non-finite norm".into()));
        }
        Ok(EmbeddingVector { values: values.iter().map(|v| (v / norm) as f32).collect() })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.values, &other.values)
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliProbs {
    pub entailment: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntailmentJudgment {
    pub label: NliLabel,
    pub prob: NliProbs,
}

impl EntailmentJudgment {
    /// Normalizes the three scores and labels by argmax; ties go to neutral.
    pub fn from_scores(entailment: f64, neutral: f64, contradiction: f64) -> Result<Self, BackendError> {
        let scores = [entailment, neutral, contradiction];
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(BackendError::Malformed(format!("invalid entailment scores {scores:?}")));
        }
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            return Err(BackendError::Malformed("entailment scores sum to zero".into()));
        }
        let prob = NliProbs {
            entailment: entailment / total,
            neutral: neutral / total,
            contradiction: contradiction / total,
        };
        let max = prob.entailment.max(prob.neutral).max(prob.contradiction);
        let label = if prob.neutral == max || prob.entailment == prob.contradiction {
            NliLabel::Neutral
        } else if prob.entailment == max {
            NliLabel::Entailment
        } else {
            NliLabel::Contradiction
        };
        Ok(EntailmentJudgment { label, prob })
    }

    /// Entailment holds iff the argmax label is `entailment`.
    pub fn holds(&self) -> bool {
        self.label == NliLabel::Entailment
    }

    pub fn entail_prob(&self) -> f64 {
        self.prob.entailment
    }
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError>;
}

pub trait Embedder: Send + Sync {
    /// Embeds up to [`Embedder::max_batch`] texts, output aligned to input.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError>;

    fn max_batch(&self) -> usize {
        64
    }

    fn multilingual(&self) -> bool {
        false
    }
}

pub trait Entailer: Send + Sync {
    /// Directional judgment: does `premise` entail `hypothesis`?
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<EntailmentJudgment, BackendError>;
}

/// Embeds any number of texts in batches of at most `max_batch`, checking
/// that every vector has the same dimension.
pub fn embed_all(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(embedder.max_batch().max(1)) {
        let vectors = embedder.embed_batch(chunk)?;
        if vectors.len() != chunk.len() {
            return Err(BackendError::Malformed(format!(
                "{} embeddings for {} texts",
                vectors.len(),
                chunk.len()
            )));
        }
        out.extend(vectors);
    }
    if let Some(first) = out.first() {
        let dim = first.dim();
        if let Some(bad) = out.iter().find(|v| v.dim() != dim) {
            return Err(BackendError::DimMismatch { expected: dim, got: bad.dim() });
        }
    }
    Ok(out)
}

/// Mutual entailment plus its clustering score (product of both
/// directional entailment probabilities). `None` when either direction
/// fails.
pub fn mutual_entailment(
    entailer: &dyn Entailer,
    a: &str,
    b: &str,
) -> Result<Option<f64>, BackendError> {
    let ab = entailer.entails(a, b)?;
    if !ab.holds() {
        return Ok(None);
    }
    let ba = entailer.entails(b, a)?;
    if !ba.holds() {
        return Ok(None);
    }
    Ok(Some(ab.entail_prob() * ba.entail_prob()))
}

fn check_kind(desc: &BackendDescriptor, expected: BackendKind) -> Result<(), BackendError> {
    if desc.kind != expected {
        return Err(BackendError::WrongKind { expected, found: desc.kind });
    }
    Ok(())
}

pub fn build_generator(desc: &BackendDescriptor) -> Result<Arc<dyn Generator>, BackendError> {
    check_kind(desc, BackendKind::Generation)?;
    let admission = Admission::new(desc.max_in_flight as usize);
    if desc.is_mock() {
        let mock = mock::MockGenerator::new(desc.mock.clone().unwrap_or_default());
        return Ok(Arc::new(Throttled::new(mock, admission)));
    }
    Ok(Arc::new(Throttled::new(http::HttpGenerator::new(desc.clone()), admission)))
}

pub fn build_embedder(desc: &BackendDescriptor) -> Result<Arc<dyn Embedder>, BackendError> {
    check_kind(desc, BackendKind::Embedding)?;
    let admission = Admission::new(desc.max_in_flight as usize);
    if desc.is_mock() {
        let mock = mock::MockEmbedder::new(desc.mock.clone().unwrap_or_default())
            .with_batch(desc.batch_size)
            .with_multilingual(desc.multilingual);
        return Ok(Arc::new(Throttled::new(mock, admission)));
    }
    Ok(Arc::new(Throttled::new(http::HttpEmbedder::new(desc.clone()), admission)))
}

/// Entailment backends are always cached by exact (premise, hypothesis).
pub fn build_entailer(desc: &BackendDescriptor) -> Result<Arc<dyn Entailer>, BackendError> {
    check_kind(desc, BackendKind::Entailment)?;
    let admission = Admission::new(desc.max_in_flight as usize);
    if desc.is_mock() {
        let mock = mock::MockEntailer::new(desc.mock.clone().unwrap_or_default());
        return Ok(Arc::new(CachedEntailer::new(Throttled::new(mock, admission))));
    }
    Ok(Arc::new(CachedEntailer::new(Throttled::new(http::HttpEntailer::new(desc.clone()), admission))))
}
