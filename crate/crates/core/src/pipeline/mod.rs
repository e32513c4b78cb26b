//! Stage orchestration over a run directory `<output_dir>/<run_id>/`.
//!
//! Every stage reads only the checkpoints it declares, skips work already
//! recorded, appends new records with a flush per record, and finally
//! rewrites its outputs in canonical order so that interrupted and resumed
//! runs end byte-identical to uninterrupted ones.

mod cluster;
mod compare;
mod decompose;
mod diversity;
mod generate;
mod represent;
mod simulate;

pub use cluster::{ClusterCellMeta, ClusterMeta};
pub use compare::{JsdReport, TopicJsd};
pub use diversity::diversity_reports;
pub use generate::RagContextRecord;
pub use represent::RepresentativenessRecord;
pub use simulate::{SimulationTruth, TruthCell};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    build_embedder, build_entailer, build_generator, BackendError, Embedder, EmbeddingVector, EntailmentJudgment,
    Entailer, GenerationRequest, Generator,
};
use crate::corpus::DecompositionPromptId;
use crate::domain::{Claim, GenerationSetting, Topic};
use crate::exec::Execution;
use crate::io::{self, IoError, JsonlAppender};
use crate::manifest::{RunManifest, SimilarityFloor};
use crate::report::ReportError;
use crate::seed;

pub const RUN_INFO: &str = "run.json";
pub const RESPONSES: &str = "responses.jsonl";
pub const PAGES: &str = "pages.jsonl";
pub const PAGES_REJECTED: &str = "pages_rejected.jsonl";
pub const PARAGRAPHS: &str = "paragraphs.jsonl";
pub const RAG_CONTEXTS: &str = "rag_contexts.jsonl";
pub const CLAIMS: &str = "claims.jsonl";
pub const DECOMPOSE_PROGRESS: &str = "decompose_progress.jsonl";
pub const CLUSTERS: &str = "clusters.jsonl";
pub const CLUSTER_PROGRESS: &str = "cluster_progress.jsonl";
pub const CLUSTER_META: &str = "cluster_meta.json";
pub const CLUSTER_CHECKPOINTS: &str = "cluster_checkpoints";
pub const DIVERSITY: &str = "diversity.jsonl";
pub const JSD_MATRIX: &str = "jsd_matrix.json";
pub const MATCHES: &str = "matches.jsonl";
pub const REPRESENT_PROGRESS: &str = "represent_progress.jsonl";
pub const REPRESENTATIVENESS: &str = "representativeness.jsonl";
pub const TRUTH: &str = "truth.json";
pub const FAILURES: &str = "failures.jsonl";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Generate,
    Decompose,
    Cluster,
    Diversity,
    Compare,
    Represent,
    Report,
    Simulate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Decompose => "decompose",
            Stage::Cluster => "cluster",
            Stage::Diversity => "diversity",
            Stage::Compare => "compare",
            Stage::Represent => "represent",
            Stage::Report => "report",
            Stage::Simulate => "simulate",
        }
    }

    /// Checkpoints that must exist before the stage may run.
    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::Generate | Stage::Simulate => &[],
            Stage::Decompose => &[RESPONSES],
            Stage::Cluster | Stage::Compare => &[CLAIMS],
            Stage::Diversity | Stage::Represent => &[CLAIMS, CLUSTERS],
            Stage::Report => &[DIVERSITY],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| format!("unknown stage `{s}`"))
    }
}

/// Per-invocation overrides of the manifest.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces the manifest seed as the root of this stage's seed fan-out.
    pub stage_seed: Option<u64>,
    /// Continue in a run directory written under a different manifest.
    pub resume: bool,
    pub similarity_floor: Option<SimilarityFloor>,
    pub decomposition_prompt: Option<DecompositionPromptId>,
    pub exec: Execution,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage `{stage}` needs checkpoint {} which does not exist; run the earlier stage first", path.display())]
    MissingCheckpoint { stage: Stage, path: PathBuf },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(
        "run directory {} was written by a manifest with config hash {found}, this manifest hashes to {expected}; pass --resume to continue there anyway",
        dir.display()
    )]
    ForeignRunDir { dir: PathBuf, expected: String, found: String },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("backend setup failed: {0}")]
    Backend(#[from] BackendError),
}

impl PipelineError {
    /// 2 for configuration and staging errors, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Io(_) | PipelineError::Report(_) => 1,
            _ => 2,
        }
    }
}

/// One line of `failures.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: Stage,
    pub cell: String,
    pub code: String,
    pub message: String,
}

/// Identity of a run directory, written as `run.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub config_hash: String,
    pub tool_version: String,
    pub schema_version: String,
    pub seed: u64,
    /// Token estimator used for RAG budgets.
    pub token_proxy: String,
    pub topics: Vec<Topic>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: Stage,
    pub rows: Vec<(String, String)>,
    pub failures: usize,
    /// Calls made to any backend during the stage.
    pub backend_calls: u64,
}

impl StageSummary {
    fn new(stage: Stage) -> Self {
        StageSummary { stage, rows: Vec::new(), failures: 0, backend_calls: 0 }
    }

    fn row(&mut self, name: &str, value: impl fmt::Display) {
        self.rows.push((name.to_string(), value.to_string()));
    }
}

impl fmt::Display for StageSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut rows = self.rows.clone();
        rows.push(("backend calls".into(), self.backend_calls.to_string()));
        rows.push(("failures".into(), self.failures.to_string()));
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        writeln!(f, "stage {}", self.stage)?;
        for (k, v) in rows {
            writeln!(f, "  {k:<width$}  {v}")?;
        }
        Ok(())
    }
}

/// Counts every call that passes through to the wrapped backend.
struct Counted<B: ?Sized> {
    inner: Arc<B>,
    calls: Arc<AtomicU64>,
}

impl<B: ?Sized> Counted<B> {
    fn tick(&self) {
        self.calls.fetch_add(1, Ordering::Relaxed);
    }
}

impl<B: Generator + ?Sized> Generator for Counted<B> {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        self.tick();
        self.inner.generate(req)
    }
}

impl<B: Embedder + ?Sized> Embedder for Counted<B> {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        self.tick();
        self.inner.embed_batch(texts)
    }

    fn max_batch(&self) -> usize {
        self.inner.max_batch()
    }

    fn multilingual(&self) -> bool {
        self.inner.multilingual()
    }
}

impl<B: Entailer + ?Sized> Entailer for Counted<B> {
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<EntailmentJudgment, BackendError> {
        self.tick();
        self.inner.entails(premise, hypothesis)
    }
}

/// The services a run talks to.
#[derive(Clone)]
pub struct Backends {
    pub generators: BTreeMap<String, Arc<dyn Generator>>,
    pub decomposer: Arc<dyn Generator>,
    pub embedder: Arc<dyn Embedder>,
    pub entailer: Arc<dyn Entailer>,
}

impl Backends {
    pub fn from_manifest(m: &RunManifest) -> Result<Self, BackendError> {
        let mut generators = BTreeMap::new();
        for g in &m.generators {
            generators.insert(g.id.clone(), build_generator(&g.backend)?);
        }
        Ok(Backends {
            generators,
            decomposer: build_generator(&m.decomposer)?,
            embedder: build_embedder(&m.embedding)?,
            entailer: build_entailer(&m.entailment)?,
        })
    }

    fn counted(self, calls: &Arc<AtomicU64>) -> Self {
        fn wrap<B: ?Sized>(inner: Arc<B>, calls: &Arc<AtomicU64>) -> Counted<B> {
            Counted { inner, calls: calls.clone() }
        }
        Backends {
            generators: self
                .generators
                .into_iter()
                .map(|(k, g)| (k, Arc::new(wrap(g, calls)) as Arc<dyn Generator>))
                .collect(),
            decomposer: Arc::new(wrap(self.decomposer, calls)),
            embedder: Arc::new(wrap(self.embedder, calls)),
            entailer: Arc::new(wrap(self.entailer, calls)),
        }
    }
}

/// (topic, generator, setting): the unit of clustering and diversity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub topic_id: String,
    pub generator_id: String,
    pub setting: GenerationSetting,
}

impl CellKey {
    pub fn of(claim: &Claim) -> Self {
        CellKey {
            topic_id: claim.topic_id.clone(),
            generator_id: claim.response_ref.generator_id.clone(),
            setting: claim.response_ref.setting,
        }
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.topic_id, self.generator_id, self.setting)
    }
}

/// Groups claims by cell, keeping their order within each cell.
pub fn group_cells(claims: Vec<Claim>) -> BTreeMap<CellKey, Vec<Claim>> {
    let mut cells: BTreeMap<CellKey, Vec<Claim>> = BTreeMap::new();
    for c in claims {
        cells.entry(CellKey::of(&c)).or_default().push(c);
    }
    cells
}

pub struct Pipeline {
    manifest: RunManifest,
    options: RunOptions,
    backends: Backends,
    dir: PathBuf,
    calls: Arc<AtomicU64>,
    failures: Mutex<Vec<FailureRecord>>,
}

impl Pipeline {
    /// Builds backends from the manifest. No network traffic happens here.
    pub fn new(manifest: RunManifest, options: RunOptions) -> Result<Self, PipelineError> {
        let backends = Backends::from_manifest(&manifest)?;
        Ok(Self::with_backends(manifest, options, backends))
    }

    pub fn with_backends(manifest: RunManifest, options: RunOptions, backends: Backends) -> Self {
        let calls = Arc::new(AtomicU64::new(0));
        let dir = manifest.run_dir();
        Pipeline {
            backends: backends.counted(&calls),
            manifest,
            options,
            dir,
            calls,
            failures: Mutex::new(Vec::new()),
        }
    }

    pub fn run_dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn root_seed(&self) -> u64 {
        self.options.stage_seed.unwrap_or(self.manifest.seed)
    }

    /// Seed for one unit of work: hash(root seed, stage, cell).
    fn cell_seed(&self, stage: Stage, cell: &str) -> u64 {
        seed::derive_seed(self.root_seed(), stage.as_str(), cell)
    }

    fn now(&self) -> DateTime<Utc> {
        self.manifest.fixed_timestamp.unwrap_or_else(Utc::now)
    }

    fn fail(&self, stage: Stage, cell: impl fmt::Display, code: &str, message: impl fmt::Display) {
        let record =
            FailureRecord { stage, cell: cell.to_string(), code: code.to_string(), message: message.to_string() };
        log::error!("{stage} {}: {code}: {}", record.cell, record.message);
        self.failures.lock().expect("failure list poisoned").push(record);
    }

    fn prepare(&self, stage: Stage) -> Result<(), PipelineError> {
        for input in stage.inputs() {
            let path = self.path(input);
            if !path.exists() {
                return Err(PipelineError::MissingCheckpoint { stage, path });
            }
        }
        let expected = RunInfo {
            run_id: self.manifest.run_id.clone(),
            config_hash: self.manifest.config_hash(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            schema_version: crate::SCHEMA_VERSION.into(),
            seed: self.manifest.seed,
            token_proxy: "ceil(chars/4)".into(),
            topics: self.manifest.topics.clone(),
        };
        let info_path = self.path(RUN_INFO);
        if info_path.exists() {
            let found: RunInfo = io::read_json(&info_path)?;
            if found.config_hash != expected.config_hash && !self.options.resume {
                return Err(PipelineError::ForeignRunDir {
                    dir: self.dir.clone(),
                    expected: expected.config_hash,
                    found: found.config_hash,
                });
            }
            if found == expected {
                return Ok(());
            }
            log::warn!("resuming {} under a changed manifest", self.dir.display());
        }
        io::write_json(&info_path, &expected)?;
        Ok(())
    }

    /// Replaces this stage's entries in `failures.jsonl` with the ones
    /// recorded during this invocation.
    fn flush_failures(&self, stage: Stage) -> Result<usize, PipelineError> {
        let path = self.path(FAILURES);
        let mut all: Vec<FailureRecord> = io::read_jsonl(&path)?;
        all.retain(|f| f.stage != stage);
        let mut mine = std::mem::take(&mut *self.failures.lock().expect("failure list poisoned"));
        mine.sort();
        mine.dedup();
        let count = mine.len();
        all.extend(mine);
        if all.is_empty() {
            if path.exists() {
                std::fs::remove_file(&path).map_err(|source| io::IoError::Io { path: path.clone(), source })?;
            }
            return Ok(0);
        }
        all.sort();
        io::write_jsonl(&path, &all)?;
        Ok(count)
    }

    /// Runs one stage. `Ok` may still carry failures (partial success).
    pub fn run(&self, stage: Stage) -> Result<StageSummary, PipelineError> {
        self.prepare(stage)?;
        self.failures.lock().expect("failure list poisoned").clear();
        self.calls.store(0, Ordering::Relaxed);
        let mut summary = StageSummary::new(stage);
        match stage {
            Stage::Generate => self.generate(&mut summary)?,
            Stage::Decompose => self.decompose(&mut summary)?,
            Stage::Cluster => self.cluster(&mut summary)?,
            Stage::Diversity => self.diversity(&mut summary)?,
            Stage::Compare => self.compare(&mut summary)?,
            Stage::Represent => self.represent(&mut summary)?,
            Stage::Simulate => self.simulate(&mut summary)?,
            Stage::Report => {
                let bundle = crate::report::emit_report(&self.dir)?;
                summary.row("files written", bundle.files.len());
                summary.row("report directory", bundle.dir.display());
            }
        }
        summary.failures = self.flush_failures(stage)?;
        summary.backend_calls = self.calls.load(Ordering::Relaxed);
        Ok(summary)
    }
}

/// Appender shared across worker threads.
struct SharedAppender(Mutex<JsonlAppender>);

impl SharedAppender {
    fn open(path: &Path) -> Result<Self, IoError> {
        Ok(SharedAppender(Mutex::new(JsonlAppender::open(path)?)))
    }

    fn append<T: Serialize>(&self, record: &T) -> Result<(), IoError> {
        self.0.lock().expect("appender poisoned").append(record)
    }

    fn append_all<T: Serialize>(&self, records: &[T]) -> Result<(), IoError> {
        let mut out = self.0.lock().expect("appender poisoned");
        records.iter().try_for_each(|r| out.append(r))
    }
}

/// Owned claim ordering key for normalizing `claims.jsonl`.
fn claim_sort_key(c: &Claim) -> (String, crate::domain::ResponseRef, u32, u32, String) {
    (c.topic_id.clone(), c.response_ref.clone(), c.chunk_index, c.line_index, c.id.clone())
}

#[cfg(test)]
mod tests;
