//! Deterministic in-process backends driven by hidden class tags.
//!
//! Mock texts carry a tag `[[k<class>]]`, optionally `[[k<class>@<anchor>]]`
//! to place the text's embedding near class `anchor` while its entailment
//! behaviour follows `class`. Every output is a pure function of the input
//! and the `MockSpec` seed.
//!
//! * generation: emits `sentences_per_response` tagged sentences whose
//!   classes follow `population` (or, with `decompose`, acts as an identity
//!   decomposer that returns each sentence of the prompt's content block)
//! * embedding: same-class texts land within cosine ~0.95 of each other,
//!   different classes near-orthogonal
//! * entailment: `entailment` iff both texts carry the same class tag,
//!   otherwise `neutral`

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::distributions::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BackendError, Embedder, EmbeddingVector, Entailer, EntailmentJudgment, GenerationRequest, Generator};
use crate::corpus::split_sentences;
use crate::oracle::{render_tagged, Family, DEFAULT_TAG_SYNTAX};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSpec {
    pub seed: u64,
    pub population: Family,
    pub sentences_per_response: usize,
    /// Added to every sampled class, to give generators disjoint classes.
    pub class_offset: usize,
    /// Per-class sentence templates (`{class}`, `{variant}`), picked by
    /// class index modulo the list length.
    pub templates: Vec<String>,
    pub decompose: bool,
    pub claims_per_chunk: Option<usize>,
    pub dim: usize,
    pub noise: f64,
    pub entail_prob: f64,
    pub latency_ms: u64,
}

impl Default for MockSpec {
    fn default() -> Self {
        MockSpec {
            seed: 0,
            population: Family::Uniform { classes: 10 },
            sentences_per_response: 6,
            class_offset: 0,
            templates: vec![DEFAULT_TAG_SYNTAX.to_string()],
            decompose: false,
            claims_per_chunk: None,
            dim: 384,
            noise: 0.2,
            entail_prob: 0.9,
            latency_ms: 0,
        }
    }
}

/// Hidden tag of a mock text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tag {
    pub class: u64,
    pub anchor: u64,
}

/// Parses the first `[[k<class>]]` or `[[k<class>@<anchor>]]` tag.
pub fn parse_tag(text: &str) -> Option<Tag> {
    let mut rest = text;
    while let Some(start) = rest.find("[[k") {
        let body = &rest[start + 3..];
        if let Some(end) = body.find("]]") {
            let inner = &body[..end];
            let (c, a) = match inner.split_once('@') {
                Some((c, a)) => (c, Some(a)),
                None => (inner, None),
            };
            if let Ok(class) = c.parse::<u64>() {
                match a.map(str::parse::<u64>) {
                    None => return Some(Tag { class, anchor: class }),
                    Some(Ok(anchor)) => return Some(Tag { class, anchor }),
                    Some(Err(_)) => {}
                }
            }
        }
        rest = &rest[start + 3..];
    }
    None
}

/// Call counter and in-flight high-water mark.
#[derive(Debug, Default)]
pub struct CallStats {
    calls: AtomicU64,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl CallStats {
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    fn enter(&self, latency_ms: u64) -> InFlight<'_> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(latency_ms));
        }
        InFlight { stats: self }
    }
}

struct InFlight<'a> {
    stats: &'a CallStats,
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.stats.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

pub struct MockGenerator {
    spec: MockSpec,
    stats: Arc<CallStats>,
}

impl MockGenerator {
    pub fn new(spec: MockSpec) -> Self {
        MockGenerator { spec, stats: Arc::default() }
    }

    pub fn stats(&self) -> Arc<CallStats> {
        self.stats.clone()
    }

    fn respond(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        let sampler = self
            .spec
            .population
            .sampler()
            .map_err(|e| BackendError::InvalidRequest(format!("mock population: {e}")))?;
        let mut rng = seed::rng(seed::hash64(&[
            &self.spec.seed.to_le_bytes(),
            req.prompt.as_bytes(),
            &req.seed.to_le_bytes(),
        ]));
        let templates = if self.spec.templates.is_empty() {
            vec![DEFAULT_TAG_SYNTAX.to_string()]
        } else {
            self.spec.templates.clone()
        };
        let sentences: Vec<String> = (0..self.spec.sentences_per_response)
            .map(|_| {
                let class = sampler.sample(&mut rng) + self.spec.class_offset;
                let variant: u64 = rng.gen_range(0..1_000_000);
                render_tagged(&templates[class % templates.len()], class, variant)
            })
            .collect();
        Ok(sentences.join(" "))
    }

    fn decompose(&self, req: &GenerationRequest) -> String {
        let content = match req.prompt.rfind("\n\n") {
            Some(i) => &req.prompt[i + 2..],
            None => req.prompt.as_str(),
        };
        let mut sentences = split_sentences(content);
        if let Some(k) = self.spec.claims_per_chunk {
            sentences.truncate(k);
        }
        if sentences.is_empty() {
            return "EMPTY".into();
        }
        sentences.iter().map(|s| format!("- {s}\n")).collect()
    }
}

impl Generator for MockGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        req.validate()?;
        let _g = self.stats.enter(self.spec.latency_ms);
        if self.spec.decompose {
            Ok(self.decompose(req))
        } else {
            self.respond(req)
        }
    }
}

pub struct MockEmbedder {
    spec: MockSpec,
    batch: usize,
    multilingual: bool,
    stats: Arc<CallStats>,
}

impl MockEmbedder {
    pub fn new(spec: MockSpec) -> Self {
        MockEmbedder { spec, batch: 64, multilingual: true, stats: Arc::default() }
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch.max(1);
        self
    }

    pub fn with_multilingual(mut self, multilingual: bool) -> Self {
        self.multilingual = multilingual;
        self
    }

    pub fn stats(&self) -> Arc<CallStats> {
        self.stats.clone()
    }

    fn gaussian_unit(&self, key: &[&[u8]]) -> Vec<f64> {
        let mut rng = seed::rng(seed::hash64(key));
        let v: Vec<f64> = (0..self.spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    /// Deterministic embedding of one text.
    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        let seed = self.spec.seed.to_le_bytes();
        let noise = self.gaussian_unit(&[&seed, b"text", text.as_bytes()]);
        let values = match parse_tag(text) {
            Some(tag) => {
                let base = self.gaussian_unit(&[&seed, b"class", &tag.anchor.to_le_bytes()]);
                base.iter().zip(&noise).map(|(b, n)| b + self.spec.noise * n).collect()
            }
            None => noise,
        };
        EmbeddingVector::normalized(values)
    }
}

impl Embedder for MockEmbedder {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::EmptyBatch);
        }
        if texts.len() > self.batch {
            return Err(BackendError::BatchTooLarge { max: self.batch, got: texts.len() });
        }
        let _g = self.stats.enter(self.spec.latency_ms);
        texts.iter().map(|t| self.embed_one(t)).collect()
    }

    fn max_batch(&self) -> usize {
        self.batch
    }

    fn multilingual(&self) -> bool {
        self.multilingual
    }
}

pub struct MockEntailer {
    spec: MockSpec,
    stats: Arc<CallStats>,
}

impl MockEntailer {
    pub fn new(spec: MockSpec) -> Self {
        MockEntailer { spec, stats: Arc::default() }
    }

    pub fn stats(&self) -> Arc<CallStats> {
        self.stats.clone()
    }
}

impl Entailer for MockEntailer {
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<EntailmentJudgment, BackendError> {
        if premise.trim().is_empty() || hypothesis.trim().is_empty() {
            return Err(BackendError::InvalidRequest("entailment inputs must be non-empty".into()));
        }
        let _g = self.stats.enter(self.spec.latency_ms);
        match (parse_tag(premise), parse_tag(hypothesis)) {
            (Some(a), Some(b)) if a.class == b.class => {
                let p = self.spec.entail_prob;
                EntailmentJudgment::from_scores(p, (1.0 - p) * 0.8, (1.0 - p) * 0.2)
            }
            _ => EntailmentJudgment::from_scores(0.05, 0.9, 0.05),
        }
    }
}

/// The three mock backends sharing one spec.
pub fn mock_suite(spec: &MockSpec) -> (MockGenerator, MockEmbedder, MockEntailer) {
    (MockGenerator::new(spec.clone()), MockEmbedder::new(spec.clone()), MockEntailer::new(spec.clone()))
}
