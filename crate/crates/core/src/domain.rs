//! Shared domain types and the JSONL record schemas exchanged between
//! pipeline stages.

use std::collections::HashMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::mock::MockSpec;

/// Token substituted by [`render_prompt`].
pub const TOPIC_PLACEHOLDER: &str = "{topic}";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("template `{template_id}` must contain `{{topic}}` exactly once (found {found})")]
    MissingPlaceholder { template_id: String, found: usize },
    #[error("topic `{topic_id}` has an empty label")]
    MissingLabel { topic_id: String },
    #[error("abundance counts must all be >= 1")]
    ZeroAbundance,
    #[error("invalid meaning class table: {0}")]
    InvalidTable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub country: Option<String>,
    #[serde(default)]
    pub language: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub template: String,
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), DomainError> {
        let found = self.template.matches(TOPIC_PLACEHOLDER).count();
        if found != 1 {
            return Err(DomainError::MissingPlaceholder { template_id: self.id.clone(), found });
        }
        Ok(())
    }
}

/// Substitutes the topic label into the template's single placeholder.
pub fn render_prompt(template: &PromptTemplate, topic: &Topic) -> Result<String, DomainError> {
    template.validate()?;
    if topic.label.trim().is_empty() {
        return Err(DomainError::MissingLabel { topic_id: topic.id.clone() });
    }
    Ok(template.template.replacen(TOPIC_PLACEHOLDER, &topic.label, 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum GenerationSetting {
    Ift,
    Rag,
    Search,
}

impl GenerationSetting {
    pub fn as_str(self) -> &'static str {
        match self {
            GenerationSetting::Ift => "IFT",
            GenerationSetting::Rag => "RAG",
            GenerationSetting::Search => "SEARCH",
        }
    }
}

impl fmt::Display for GenerationSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifies the response (or search page) a claim was extracted from.
///
/// For SEARCH-setting pages `prompt_id` is `None` and `seed` holds the page
/// number within the topic.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResponseRef {
    pub generator_id: String,
    pub prompt_id: Option<String>,
    pub setting: GenerationSetting,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub generator_id: String,
    pub topic_id: String,
    pub prompt_id: Option<String>,
    pub setting: GenerationSetting,
    pub text: String,
    #[serde(default)]
    pub context_ids: Vec<String>,
    pub seed: u64,
    pub created_at: DateTime<Utc>,
}

impl ResponseRecord {
    pub fn response_ref(&self) -> ResponseRef {
        ResponseRef {
            generator_id: self.generator_id.clone(),
            prompt_id: self.prompt_id.clone(),
            setting: self.setting,
            seed: self.seed,
        }
    }

    /// Uniqueness key: (generator_id, topic_id, prompt_id, setting, seed).
    pub fn key(&self) -> String {
        cell_key(
            &self.generator_id,
            &self.topic_id,
            self.prompt_id.as_deref(),
            self.setting,
            self.seed,
        )
    }
}

pub fn cell_key(
    generator_id: &str,
    topic_id: &str,
    prompt_id: Option<&str>,
    setting: GenerationSetting,
    seed: u64,
) -> String {
    format!("{generator_id}\u{1f}{topic_id}\u{1f}{}\u{1f}{setting}\u{1f}{seed}", prompt_id.unwrap_or(""))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    pub topic_id: String,
    pub response_ref: ResponseRef,
    pub chunk_index: u32,
    /// Position of the claim among the parsed lines of its chunk.
    pub line_index: u32,
    pub text: String,
}

impl Claim {
    /// Stable id: hash(response_ref, chunk_index, line_index), scoped by topic.
    pub fn make_id(topic_id: &str, r: &ResponseRef, chunk_index: u32, line_index: u32) -> String {
        crate::seed::short_id(&[
            topic_id,
            &r.generator_id,
            r.prompt_id.as_deref().unwrap_or(""),
            r.setting.as_str(),
            &r.seed.to_string(),
            &chunk_index.to_string(),
            &line_index.to_string(),
        ])
    }

    /// Total order over claims, computable from persisted records alone.
    pub fn order_key(&self) -> (&str, &ResponseRef, u32, u32, &str) {
        (&self.topic_id, &self.response_ref, self.chunk_index, self.line_index, &self.id)
    }
}

pub fn sort_claims(claims: &mut [Claim]) {
    claims.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub claim_id: String,
    pub cluster_id: usize,
}

/// Partition of claims into meaning classes with per-class abundances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeaningClassTable {
    /// One entry per claim, in clustering order.
    pub assignments: Vec<ClusterAssignment>,
    /// `counts[i]` is the abundance of cluster `i`.
    pub counts: Vec<u64>,
    pub n: u64,
}

impl MeaningClassTable {
    pub fn empty() -> Self {
        MeaningClassTable { assignments: Vec::new(), counts: Vec::new(), n: 0 }
    }

    /// Builds a table from aligned claim ids and arbitrary labels, renumbering
    /// clusters densely by first appearance.
    pub fn from_labels<S: AsRef<str>>(claim_ids: &[S], labels: &[usize]) -> Result<Self, DomainError> {
        if claim_ids.len() != labels.len() {
            return Err(DomainError::InvalidTable(format!(
                "{} claim ids but {} labels",
                claim_ids.len(),
                labels.len()
            )));
        }
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut counts = Vec::new();
        let mut assignments = Vec::with_capacity(labels.len());
        for (id, &label) in claim_ids.iter().zip(labels) {
            let next = remap.len();
            let dense = *remap.entry(label).or_insert(next);
            if dense == counts.len() {
                counts.push(0);
            }
            counts[dense] += 1;
            assignments.push(ClusterAssignment { claim_id: id.as_ref().to_string(), cluster_id: dense });
        }
        let table = MeaningClassTable { n: assignments.len() as u64, assignments, counts };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.counts.iter().sum::<u64>() != self.n || self.assignments.len() as u64 != self.n {
            return Err(DomainError::InvalidTable("counts do not sum to n".into()));
        }
        if self.counts.contains(&0) {
            return Err(DomainError::InvalidTable("cluster ids are not dense".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut tally = vec![0u64; self.counts.len()];
        for a in &self.assignments {
            if !seen.insert(a.claim_id.as_str()) {
                return Err(DomainError::InvalidTable(format!("claim {} assigned twice", a.claim_id)));
            }
            match tally.get_mut(a.cluster_id) {
                Some(t) => *t += 1,
                None => return Err(DomainError::InvalidTable(format!("cluster {} out of range", a.cluster_id))),
            }
        }
        if tally != self.counts {
            return Err(DomainError::InvalidTable("counts disagree with assignments".into()));
        }
        Ok(())
    }

    pub fn num_clusters(&self) -> usize {
        self.counts.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.assignments.iter().map(|a| a.cluster_id).collect()
    }

    pub fn cluster_of(&self) -> HashMap<&str, usize> {
        self.assignments.iter().map(|a| (a.claim_id.as_str(), a.cluster_id)).collect()
    }

    pub fn abundance(&self) -> AbundanceVector {
        AbundanceVector(self.counts.clone())
    }
}

/// Class abundances `x_i`; the only input the diversity statistics need.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbundanceVector(Vec<u64>);

impl AbundanceVector {
    pub fn new(counts: Vec<u64>) -> Result<Self, DomainError> {
        if counts.contains(&0) {
            return Err(DomainError::ZeroAbundance);
        }
        Ok(AbundanceVector(counts))
    }

    /// Drops zero entries, keeping the order of the rest.
    pub fn from_counts_lossy(counts: impl IntoIterator<Item = u64>) -> Self {
        AbundanceVector(counts.into_iter().filter(|&c| c > 0).collect())
    }

    /// Abundances of the distinct labels, ordered by label value.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut map = std::collections::BTreeMap::new();
        for &l in labels {
            *map.entry(l).or_insert(0u64) += 1;
        }
        AbundanceVector(map.into_values().collect())
    }

    pub fn counts(&self) -> &[u64] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn n(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Number of singleton classes.
    pub fn f1(&self) -> u64 {
        self.0.iter().filter(|&&c| c == 1).count() as u64
    }

    /// Number of doubleton classes.
    pub fn f2(&self) -> u64 {
        self.0.iter().filter(|&&c| c == 2).count() as u64
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.0.iter().map(|&c| c as f64 / n).collect()
    }

    /// One label per individual, class `i` repeated `x_i` times.
    pub fn expand_labels(&self) -> Vec<usize> {
        self.0.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(i, c as usize)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub generator_id: String,
    pub topic_id: String,
    pub setting: GenerationSetting,
    pub n: u64,
    pub num_classes: u64,
    pub f1: u64,
    pub f2: u64,
    pub coverage: f64,
    /// Rarefied mean HSD when rarefied, otherwise the point estimate.
    pub hsd: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub rarefied_to_coverage: Option<f64>,
    /// HSD of the full, unrarefied sample.
    pub hsd_unrarefied: f64,
    #[serde(default)]
    pub hsd_sd: Option<f64>,
    #[serde(default)]
    pub resamples: Option<u32>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Generation,
    Embedding,
    Entailment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 5, base_backoff_ms: 500 }
    }
}

fn default_in_flight() -> u32 {
    4
}
fn default_timeout() -> u64 {
    120_000
}
fn default_batch() -> usize {
    64
}

/// Where and how to reach one generation / embedding / entailment service.
///
/// An `endpoint_url` starting with `mock:` selects the in-process mock,
/// configured by `mock`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub endpoint_url: String,
    #[serde(default)]
    pub model_name: String,
    /// Name of the environment variable holding the API secret.
    #[serde(default)]
    pub credential_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: u32,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Embedding backends only: whether cross-language matching is meaningful.
    #[serde(default)]
    pub multilingual: bool,
    #[serde(default)]
    pub mock: Option<MockSpec>,
}

impl BackendDescriptor {
    pub fn is_mock(&self) -> bool {
        self.endpoint_url.starts_with("mock:")
    }

    pub fn mock(kind: BackendKind, spec: MockSpec) -> Self {
        BackendDescriptor {
            kind,
            endpoint_url: "mock:".into(),
            model_name: "mock".into(),
            credential_env: None,
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
            timeout_ms: default_timeout(),
            batch_size: default_batch(),
            multilingual: true,
            mock: Some(spec),
        }
    }
}
