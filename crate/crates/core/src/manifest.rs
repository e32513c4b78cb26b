//! Run manifest: the single JSON document configuring a run.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusterParams;
use crate::corpus::DecompositionPromptId;
use crate::domain::{BackendDescriptor, BackendKind, GenerationSetting, PromptTemplate, Topic};
use crate::backend::mock::MockSpec;
use crate::oracle::{Family, PopulationSpec};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub id: String,
    pub backend: BackendDescriptor,
    pub settings: Vec<GenerationSetting>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoFloor {
    Auto,
}

/// Cosine floor above which retrieved paragraphs are shuffled. `"auto"`
/// uses the mean prompt-paragraph similarity of the ingested corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SimilarityFloor {
    Fixed(f64),
    Auto(AutoFloor),
}

impl Default for SimilarityFloor {
    fn default() -> Self {
        SimilarityFloor::Fixed(0.35)
    }
}

impl FromStr for SimilarityFloor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(SimilarityFloor::Auto(AutoFloor::Auto));
        }
        s.parse::<f64>()
            .ok()
            .filter(|x| (-1.0..=1.0).contains(x))
            .map(SimilarityFloor::Fixed)
            .ok_or_else(|| format!("expected `auto` or a number in [-1, 1], got `{s}`"))
    }
}

impl fmt::Display for SimilarityFloor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimilarityFloor::Fixed(x) => write!(f, "{x}"),
            SimilarityFloor::Auto(_) => f.write_str("auto"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Root of `<topic_id>/<n>.txt` page files; enables the SEARCH baseline
    /// and RAG cells.
    pub search_dir: Option<PathBuf>,
    pub similarity_floor: SimilarityFloor,
    pub token_budget: usize,
    pub min_page_chars: usize,
    pub min_paragraph_chars: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            search_dir: None,
            similarity_floor: SimilarityFloor::default(),
            token_budget: 1000,
            min_page_chars: 1000,
            min_paragraph_chars: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RarefactionConfig {
    /// Fixed target; by default each topic uses the minimum coverage
    /// reached by any generator cell in it.
    pub target_coverage: Option<f64>,
    pub resamples: u32,
    /// Leave SEARCH cells unrarefied when their coverage is below the
    /// lowest generator coverage of the topic.
    pub search_exemption: bool,
}

impl Default for RarefactionConfig {
    fn default() -> Self {
        RarefactionConfig { target_coverage: None, resamples: 100, search_exemption: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { resamples: 1000, level: 0.95 }
    }
}

fn default_samples() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Stamp every record with this time instead of the wall clock, making
    /// outputs byte-reproducible.
    #[serde(default)]
    pub fixed_timestamp: Option<DateTime<Utc>>,
    pub topics: Vec<Topic>,
    pub templates: Vec<PromptTemplate>,
    pub generators: Vec<GeneratorSpec>,
    /// Responses drawn per (generator, topic, template, setting).
    #[serde(default = "default_samples")]
    pub samples_per_prompt: u32,
    pub decomposer: BackendDescriptor,
    #[serde(default)]
    pub decomposition_prompt: DecompositionPromptId,
    pub embedding: BackendDescriptor,
    pub entailment: BackendDescriptor,
    #[serde(default)]
    pub cluster: ClusterParams,
    #[serde(default)]
    pub rarefaction: RarefactionConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    /// Root of `<topic_id>/<language>.jsonl` reference claim files.
    #[serde(default)]
    pub references_dir: Option<PathBuf>,
    /// BCP-47 tag of the generated text, for reference matching.
    #[serde(default = "default_language")]
    pub generation_language: String,
    /// Oracle populations written by the `simulate` stage.
    #[serde(default)]
    pub simulation: Vec<SimulatedGenerator>,
}

fn default_language() -> String {
    "en".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedGenerator {
    pub generator_id: String,
    pub population: PopulationSpec,
}

/// Generator id under which SEARCH pages are recorded.
pub const SEARCH_GENERATOR_ID: &str = "search";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationCode {
    InvalidRunId,
    NoTopics,
    DuplicateTopicId,
    MissingLabel,
    DuplicateTemplateId,
    MissingPlaceholder,
    NoGenerators,
    DuplicateGeneratorId,
    ReservedGeneratorId,
    InvalidSetting,
    InvalidBackend,
    InvalidClusterParams,
    InvalidRarefaction,
    InvalidBootstrap,
    InvalidRetrieval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    /// Path of the offending field, e.g. `topics[2].id`.
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {}: {}", self.code, self.field, self.message)
    }
}

fn backend_violations(desc: &BackendDescriptor, kind: BackendKind, field: &str, out: &mut Vec<Violation>) {
    let mut bad = |m: String| {
        out.push(Violation { code: ViolationCode::InvalidBackend, field: field.to_string(), message: m })
    };
    if desc.kind != kind {
        bad(format!("kind is {:?}, expected {:?}", desc.kind, kind));
    }
    if desc.max_in_flight == 0 {
        bad("max_in_flight must be >= 1".into());
    }
    if desc.retry.max_attempts == 0 {
        bad("retry.max_attempts must be >= 1".into());
    }
    if desc.batch_size == 0 {
        bad("batch_size must be >= 1".into());
    }
    if !desc.is_mock() && url::Url::parse(&desc.endpoint_url).is_err() {
        bad(format!("endpoint_url `{}` is neither `mock:` nor a URL", desc.endpoint_url));
    }
}

/// Every invariant violation in `m`; empty iff the manifest is runnable.
pub fn validate_run_manifest(m: &RunManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |code, field: String, message: String| out.push(Violation { code, field, message });

    if m.run_id.is_empty() || m.run_id.contains(['/', '\\']) || m.run_id == "." || m.run_id == ".." {
        push(ViolationCode::InvalidRunId, "run_id".into(), "must be a non-empty single path component".into());
    }
    if m.topics.is_empty() {
        push(ViolationCode::NoTopics, "topics".into(), "at least one topic is required".into());
    }
    let mut ids = HashSet::new();
    for (i, t) in m.topics.iter().enumerate() {
        if !ids.insert(&t.id) {
            push(ViolationCode::DuplicateTopicId, format!("topics[{i}].id"), format!("`{}` repeats", t.id));
        }
        if t.label.trim().is_empty() {
            push(ViolationCode::MissingLabel, format!("topics[{i}].label"), "label is empty".into());
        }
    }
    let mut ids = HashSet::new();
    for (i, t) in m.templates.iter().enumerate() {
        if !ids.insert(&t.id) {
            push(ViolationCode::DuplicateTemplateId, format!("templates[{i}].id"), format!("`{}` repeats", t.id));
        }
        if let Err(e) = t.validate() {
            push(ViolationCode::MissingPlaceholder, format!("templates[{i}].template"), e.to_string());
        }
    }
    let search = m.retrieval.search_dir.is_some();
    if m.generators.is_empty() && !search {
        push(ViolationCode::NoGenerators, "generators".into(), "no generators and no search corpus".into());
    }
    let mut ids = HashSet::new();
    for (i, g) in m.generators.iter().enumerate() {
        if !ids.insert(&g.id) {
            push(ViolationCode::DuplicateGeneratorId, format!("generators[{i}].id"), format!("`{}` repeats", g.id));
        }
        if g.id == SEARCH_GENERATOR_ID {
            push(
                ViolationCode::ReservedGeneratorId,
                format!("generators[{i}].id"),
                format!("`{SEARCH_GENERATOR_ID}` is reserved for the search baseline"),
            );
        }
        for (k, s) in g.settings.iter().enumerate() {
            let field = format!("generators[{i}].settings[{k}]");
            match s {
                GenerationSetting::Search => push(
                    ViolationCode::InvalidSetting,
                    field,
                    "SEARCH comes from retrieval.search_dir, not from a generator".into(),
                ),
                GenerationSetting::Rag if !search => {
                    push(ViolationCode::InvalidSetting, field, "RAG needs retrieval.search_dir".into())
                }
                _ => {}
            }
        }
    }
    if m.samples_per_prompt == 0 {
        push(ViolationCode::InvalidRarefaction, "samples_per_prompt".into(), "must be >= 1".into());
    }
    for (i, g) in m.generators.iter().enumerate() {
        backend_violations(&g.backend, BackendKind::Generation, &format!("generators[{i}].backend"), &mut out);
    }
    backend_violations(&m.decomposer, BackendKind::Generation, "decomposer", &mut out);
    backend_violations(&m.embedding, BackendKind::Embedding, "embedding", &mut out);
    backend_violations(&m.entailment, BackendKind::Entailment, "entailment", &mut out);

    let mut push = |code, field: &str, message: String| {
        out.push(Violation { code, field: field.to_string(), message })
    };
    if let Err(e) = m.cluster.validate() {
        push(ViolationCode::InvalidClusterParams, "cluster", e.to_string());
    }
    if let Some(t) = m.rarefaction.target_coverage {
        if !(t > 0.0 && t <= 1.0) {
            push(ViolationCode::InvalidRarefaction, "rarefaction.target_coverage", format!("{t} not in (0, 1]"));
        }
    }
    if m.rarefaction.resamples == 0 {
        push(ViolationCode::InvalidRarefaction, "rarefaction.resamples", "must be >= 1".into());
    }
    if m.bootstrap.resamples == 0 || !(m.bootstrap.level > 0.0 && m.bootstrap.level < 1.0) {
        push(ViolationCode::InvalidBootstrap, "bootstrap", "resamples >= 1 and level in (0, 1) required".into());
    }
    if let SimilarityFloor::Fixed(x) = m.retrieval.similarity_floor {
        if !(-1.0..=1.0).contains(&x) {
            push(ViolationCode::InvalidRetrieval, "retrieval.similarity_floor", format!("{x} not in [-1, 1]"));
        }
    }
    if m.retrieval.token_budget == 0 {
        push(ViolationCode::InvalidRetrieval, "retrieval.token_budget", "must be >= 1".into());
    }
    out
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("manifest {path}, line {line} column {column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("manifest {path} is invalid:\n{}", .violations.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid { path: PathBuf, violations: Vec<Violation> },
}

impl RunManifest {
    /// Reads, parses and validates a manifest file.
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ManifestError::Read { path: path.into(), source })?;
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| ManifestError::Parse {
            path: path.into(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let violations = validate_run_manifest(&manifest);
        if !violations.is_empty() {
            return Err(ManifestError::Invalid { path: path.into(), violations });
        }
        Ok(manifest)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    /// Short hash of the canonical manifest, stamped on every report file.
    /// `output_dir` is left out so a run hashes the same wherever it lives.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("manifest serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
        }
        let bytes = serde_json::to_vec(&value).expect("manifest serializes");
        hex::encode(&seed::digest(&[&bytes])[..8])
    }

    pub fn topic(&self, id: &str) -> Option<&Topic> {
        self.topics.iter().find(|t| t.id == id)
    }
}

/// A runnable offline manifest: every backend is an in-process mock, the
/// decomposer returns each sentence as a claim, and generator `i` draws
/// classes from its family with a disjoint class range.
pub fn mock_manifest(run_id: &str, output_dir: &Path, generators: &[(&str, Family)]) -> RunManifest {
    let spec = MockSpec { sentences_per_response: 12, ..MockSpec::default() };
    let mock = |kind, spec: MockSpec| BackendDescriptor::mock(kind, spec);
    let offset = |i: usize| i * 10_000;
    RunManifest {
        run_id: run_id.into(),
        output_dir: output_dir.to_path_buf(),
        seed: 1,
        fixed_timestamp: Some(DateTime::UNIX_EPOCH),
        topics: vec![
            Topic { id: "t1".into(), label: "Rivers".into(), country: Some("US".into()), language: Some("en".into()) },
            Topic { id: "t2".into(), label: "Bridges".into(), country: Some("FR".into()), language: Some("en".into()) },
        ],
        templates: ["Write an essay about {topic}.", "What do you know about {topic}?", "Describe {topic}."]
            .iter()
            .enumerate()
            .map(|(i, t)| PromptTemplate { id: format!("p{i}"), template: t.to_string() })
            .collect(),
        generators: generators
            .iter()
            .enumerate()
            .map(|(i, (id, family))| GeneratorSpec {
                id: id.to_string(),
                backend: mock(
                    BackendKind::Generation,
                    MockSpec { population: family.clone(), class_offset: offset(i), seed: i as u64, ..spec.clone() },
                ),
                settings: vec![GenerationSetting::Ift],
            })
            .collect(),
        samples_per_prompt: 4,
        decomposer: mock(BackendKind::Generation, MockSpec { decompose: true, ..spec.clone() }),
        decomposition_prompt: DecompositionPromptId::P3,
        embedding: mock(BackendKind::Embedding, spec.clone()),
        entailment: mock(BackendKind::Entailment, spec),
        cluster: ClusterParams::default(),
        rarefaction: RarefactionConfig::default(),
        bootstrap: BootstrapConfig::default(),
        retrieval: RetrievalConfig::default(),
        references_dir: None,
        generation_language: default_language(),
        simulation: Vec::new(),
    }
}
