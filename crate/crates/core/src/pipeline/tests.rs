use std::fs;
use std::sync::atomic::{AtomicU64, Ordering};

use super::*;
use crate::backend::mock::{MockEntailer, MockGenerator};
use crate::domain::{DiversityReport, ResponseRecord};
use crate::manifest::mock_manifest;
use crate::oracle::{Family, PopulationSpec, DEFAULT_TAG_SYNTAX};
use crate::represent::ReferenceClaim;
use crate::manifest::SimulatedGenerator;

fn manifest(dir: &Path) -> RunManifest {
    mock_manifest(
        "run",
        dir,
        &[("narrow", Family::Uniform { classes: 4 }), ("wide", Family::Uniform { classes: 12 })],
    )
}

fn pipeline(m: &RunManifest) -> Pipeline {
    Pipeline::new(m.clone(), RunOptions::default()).unwrap()
}

const CORE: [Stage; 4] = [Stage::Generate, Stage::Decompose, Stage::Cluster, Stage::Diversity];

fn run_all(p: &Pipeline, stages: &[Stage]) {
    for &s in stages {
        let summary = p.run(s).unwrap();
        assert_eq!(summary.failures, 0, "{s}: {summary}");
    }
}

fn bytes(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| fs::read(dir.join(n)).unwrap_or_else(|e| panic!("{n}: {e}"))).collect()
}

#[test]
fn full_run_writes_every_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(tmp.path());
    let p = pipeline(&m);
    run_all(&p, &[Stage::Generate, Stage::Decompose, Stage::Cluster, Stage::Diversity, Stage::Compare, Stage::Report]);
    let dir = p.run_dir();
    for f in [RESPONSES, CLAIMS, CLUSTERS, DIVERSITY, JSD_MATRIX, CLUSTER_META, RUN_INFO] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let responses: Vec<ResponseRecord> = io::read_jsonl(&dir.join(RESPONSES)).unwrap();
    assert_eq!(responses.len(), 2 * 2 * 3 * 4);
    let reports: Vec<DiversityReport> = io::read_jsonl(&dir.join(DIVERSITY)).unwrap();
    assert_eq!(reports.len(), 4);
    for topic in ["t1", "t2"] {
        let hsd = |g: &str| reports.iter().find(|r| r.topic_id == topic && r.generator_id == g).unwrap().hsd;
        assert!(hsd("wide") > hsd("narrow") + 3.0, "{topic}: {} vs {}", hsd("wide"), hsd("narrow"));
    }
    let jsd: JsdReport = io::read_json(&dir.join(JSD_MATRIX)).unwrap();
    assert_eq!(jsd.topics.len(), 2);
    for t in &jsd.topics {
        assert_eq!(t.labels, vec!["narrow", "wide"]);
        assert!((t.matrix[0][1] - std::f64::consts::LN_2).abs() < 1e-9);
    }
    let table = fs::read_to_string(dir.join(REPORT_DIR).join("hsd_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn completed_stages_make_no_backend_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(tmp.path());
    run_all(&pipeline(&m), &CORE);
    let p = pipeline(&m);
    for s in [Stage::Generate, Stage::Decompose, Stage::Cluster] {
        let before = bytes(p.run_dir(), &[RESPONSES, CLAIMS, CLUSTERS]);
        let summary = p.run(s).unwrap();
        assert_eq!(summary.backend_calls, 0, "{s}");
        assert_eq!(bytes(p.run_dir(), &[RESPONSES, CLAIMS, CLUSTERS]), before);
    }
}

#[test]
fn missing_input_is_a_staging_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pipeline(&manifest(tmp.path()));
    let err = p.run(Stage::Diversity).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains(CLAIMS), "{err}");
    p.run(Stage::Generate).unwrap();
    p.run(Stage::Decompose).unwrap();
    let err = p.run(Stage::Diversity).unwrap_err();
    assert!(matches!(&err, PipelineError::MissingCheckpoint { path, .. } if path.ends_with(CLUSTERS)));
}

#[test]
fn foreign_run_directory_needs_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(tmp.path());
    pipeline(&m).run(Stage::Generate).unwrap();
    let mut changed = m.clone();
    changed.seed = 99;
    let err = pipeline(&changed).run(Stage::Generate).unwrap_err();
    assert!(matches!(err, PipelineError::ForeignRunDir { .. }));
    assert_eq!(err.exit_code(), 2);
    let opts = RunOptions { resume: true, ..RunOptions::default() };
    Pipeline::new(changed, opts).unwrap().run(Stage::Generate).unwrap();
}

#[test]
fn outputs_are_byte_identical_across_runs_and_modes() {
    let names = [RESPONSES, CLAIMS, CLUSTERS, CLUSTER_META, DIVERSITY];
    let mut seen = Vec::new();
    for exec in [Execution::Parallel, Execution::Sequential] {
        let tmp = tempfile::tempdir().unwrap();
        let m = manifest(tmp.path());
        let p = Pipeline::new(m, RunOptions { exec, ..RunOptions::default() }).unwrap();
        run_all(&p, &CORE);
        seen.push(bytes(p.run_dir(), &names));
    }
    assert_eq!(seen[0], seen[1]);
}

#[test]
fn stage_seed_changes_generation() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(tmp.path());
    let p = pipeline(&m);
    p.run(Stage::Generate).unwrap();
    let a = bytes(p.run_dir(), &[RESPONSES]);
    let mut m2 = m.clone();
    m2.run_id = "other".into();
    let p2 = Pipeline::new(m2, RunOptions { stage_seed: Some(5), ..RunOptions::default() }).unwrap();
    p2.run(Stage::Generate).unwrap();
    assert_ne!(a, bytes(p2.run_dir(), &[RESPONSES]));
}

/// Fails every call while `budget` is exhausted.
struct Flaky<B> {
    inner: B,
    budget: AtomicU64,
}

impl<B> Flaky<B> {
    fn new(inner: B, ok_calls: u64) -> Self {
        Flaky { inner, budget: AtomicU64::new(ok_calls) }
    }

    fn spend(&self) -> Result<(), BackendError> {
        let left = self.budget.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1));
        left.map(|_| ()).map_err(|_| BackendError::Unavailable { attempts: 1, last: "down".into() })
    }
}

impl<B: Generator> Generator for Flaky<B> {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        self.spend()?;
        self.inner.generate(req)
    }
}

impl<B: Entailer> Entailer for Flaky<B> {
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<EntailmentJudgment, BackendError> {
        self.spend()?;
        self.inner.entails(premise, hypothesis)
    }
}

#[test]
fn partial_failures_are_recorded_and_resumed() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(tmp.path());
    let reference = tempfile::tempdir().unwrap();
    let clean = pipeline(&mock_manifest("run", reference.path(), &[
        ("narrow", Family::Uniform { classes: 4 }),
        ("wide", Family::Uniform { classes: 12 }),
    ]));
    run_all(&clean, &CORE);

    let mut backends = Backends::from_manifest(&m).unwrap();
    let spec = m.generators[0].backend.mock.clone().unwrap();
    backends.generators.insert("narrow".into(), Arc::new(Flaky::new(MockGenerator::new(spec), 10)));
    let opts = RunOptions { exec: Execution::Sequential, ..RunOptions::default() };
    let flaky = Pipeline::with_backends(m.clone(), opts.clone(), backends);
    let summary = flaky.run(Stage::Generate).unwrap();
    assert_eq!(summary.failures, 14);
    let failures: Vec<FailureRecord> = io::read_jsonl(&flaky.run_dir().join(FAILURES)).unwrap();
    assert_eq!(failures.len(), 14);
    assert!(failures.iter().all(|f| f.code == "BackendUnavailable" && f.stage == Stage::Generate));

    let summary = pipeline(&m).run(Stage::Generate).unwrap();
    assert_eq!(summary.failures, 0);
    assert!(io::read_jsonl::<FailureRecord>(&flaky.run_dir().join(FAILURES)).unwrap().is_empty());

    let mut backends = Backends::from_manifest(&m).unwrap();
    let spec = m.entailment.mock.clone().unwrap();
    backends.entailer = Arc::new(Flaky::new(MockEntailer::new(spec), 300));
    let flaky = Pipeline::with_backends(m.clone(), opts, backends);
    flaky.run(Stage::Decompose).unwrap();
    let summary = flaky.run(Stage::Cluster).unwrap();
    assert!(summary.failures > 0);
    assert!(flaky.run_dir().join(CLUSTER_CHECKPOINTS).read_dir().unwrap().next().is_some());

    let p = pipeline(&m);
    run_all(&p, &[Stage::Cluster, Stage::Diversity]);
    assert!(!p.run_dir().join(CLUSTER_CHECKPOINTS).exists());
    let names = [RESPONSES, CLAIMS, CLUSTERS, CLUSTER_META, DIVERSITY];
    assert_eq!(bytes(p.run_dir(), &names), bytes(clean.run_dir(), &names));
}

fn write_page(dir: &Path, topic: &str, index: u32, url: &str, text: &str) {
    let d = dir.join(topic);
    fs::create_dir_all(&d).unwrap();
    fs::write(d.join(format!("{index}.txt")), text).unwrap();
    let meta = serde_json::json!({ "url": url, "content_type": "text/html" });
    fs::write(d.join(format!("{index}.meta.json")), meta.to_string()).unwrap();
}

fn page_text(seed: usize) -> String {
    (0..6)
        .map(|p| {
            (0..4)
                .map(|s| {
                    let class = 50_000 + (seed + p * 4 + s) % 7;
                    DEFAULT_TAG_SYNTAX.replace("{class}", &class.to_string()).replace("{variant}", &(p * 10 + s).to_string())
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[test]
fn search_and_rag_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let search = tmp.path().join("search");
    for topic in ["t1", "t2"] {
        write_page(&search, topic, 0, "https://example.org/a", &page_text(0));
        write_page(&search, topic, 1, "https://example.org/b", &page_text(3));
        write_page(&search, topic, 2, "https://twitter.com/x", &page_text(1));
        write_page(&search, topic, 3, "https://example.org/short", "Too short.");
    }
    let mut m = manifest(tmp.path());
    m.retrieval.search_dir = Some(search);
    m.retrieval.min_paragraph_chars = 50;
    m.retrieval.similarity_floor = SimilarityFloor::Fixed(-1.0);
    m.generators[1].settings.push(GenerationSetting::Rag);
    let p = pipeline(&m);
    run_all(&p, &CORE);
    let dir = p.run_dir();
    let pages: Vec<crate::retrieval::PageRecord> = io::read_jsonl(&dir.join(PAGES)).unwrap();
    assert_eq!(pages.len(), 4);
    let rejected: Vec<crate::retrieval::RejectedPage> = io::read_jsonl(&dir.join(PAGES_REJECTED)).unwrap();
    assert_eq!(rejected.len(), 4);
    let contexts: Vec<RagContextRecord> = io::read_jsonl(&dir.join(RAG_CONTEXTS)).unwrap();
    assert_eq!(contexts.len(), 2 * 3 * 4);
    assert!(contexts.iter().all(|c| c.context.token_estimate <= 1000 && !c.context.paragraph_ids.is_empty()));
    let responses: Vec<ResponseRecord> = io::read_jsonl(&dir.join(RESPONSES)).unwrap();
    let rag: Vec<_> = responses.iter().filter(|r| r.setting == GenerationSetting::Rag).collect();
    assert_eq!(rag.len(), 24);
    assert!(rag.iter().all(|r| !r.context_ids.is_empty()));
    assert_eq!(responses.iter().filter(|r| r.setting == GenerationSetting::Search).count(), 4);

    let reports: Vec<DiversityReport> = io::read_jsonl(&dir.join(DIVERSITY)).unwrap();
    let search_rows: Vec<_> = reports.iter().filter(|r| r.setting == GenerationSetting::Search).collect();
    assert_eq!(search_rows.len(), 2);
    assert!(search_rows.iter().all(|r| r.num_classes == 7));
    assert_eq!(pipeline(&m).run(Stage::Generate).unwrap().backend_calls, 0);
}

#[test]
fn simulate_then_measure() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = manifest(tmp.path());
    m.simulation = vec![
        SimulatedGenerator {
            generator_id: "sim-a".into(),
            population: PopulationSpec {
                family: Family::Uniform { classes: 5 },
                n_samples: 300,
                seed: 0,
                tag_syntax: DEFAULT_TAG_SYNTAX.into(),
            },
        },
        SimulatedGenerator {
            generator_id: "sim-b".into(),
            population: PopulationSpec {
                family: Family::Uniform { classes: 15 },
                n_samples: 300,
                seed: 0,
                tag_syntax: DEFAULT_TAG_SYNTAX.into(),
            },
        },
    ];
    let p = pipeline(&m);
    run_all(&p, &[Stage::Simulate, Stage::Cluster, Stage::Diversity]);
    let truth: SimulationTruth = io::read_json(&p.run_dir().join(TRUTH)).unwrap();
    assert_eq!(truth.cells.len(), 4);
    let reports: Vec<DiversityReport> = io::read_jsonl(&p.run_dir().join(DIVERSITY)).unwrap();
    for r in &reports {
        let t = truth.cells.iter().find(|c| c.generator_id == r.generator_id && c.topic_id == r.topic_id).unwrap();
        assert!((r.hsd_unrarefied - t.true_hsd).abs() / t.true_hsd < 0.1, "{} vs {}", r.hsd_unrarefied, t.true_hsd);
    }

    p.run(Stage::Generate).unwrap();
    let err = p.run(Stage::Simulate).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn representativeness_against_references() {
    let tmp = tempfile::tempdir().unwrap();
    let refs = tmp.path().join("refs");
    let mut m = manifest(tmp.path());
    m.references_dir = Some(refs.clone());
    m.generators.truncate(1);
    for topic in ["t1", "t2"] {
        fs::create_dir_all(refs.join(topic)).unwrap();
        let claims: Vec<ReferenceClaim> = (0..8)
            .map(|c| ReferenceClaim {
                id: format!("{topic}-r{c}"),
                topic_id: topic.into(),
                language: "en".into(),
                text: format!("Reference item {c} [[k{c}]]."),
            })
            .collect();
        io::write_jsonl(&refs.join(topic).join("en.jsonl"), &claims).unwrap();
    }
    let p = pipeline(&m);
    run_all(&p, &[Stage::Generate, Stage::Decompose, Stage::Cluster, Stage::Represent]);
    let recs: Vec<RepresentativenessRecord> = io::read_jsonl(&p.run_dir().join(REPRESENTATIVENESS)).unwrap();
    assert_eq!(recs.len(), 2);
    for r in &recs {
        assert_eq!(r.report.num_classes, 4, "{r:?}");
    }
    assert_eq!(pipeline(&m).run(Stage::Represent).unwrap().backend_calls, 0);

    m.references_dir = None;
    let opts = RunOptions { resume: true, ..RunOptions::default() };
    let err = Pipeline::new(m, opts).unwrap().run(Stage::Represent).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn stage_names_round_trip() {
    for s in [Stage::Generate, Stage::Report, Stage::Simulate] {
        assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
    }
    assert!("nope".parse::<Stage>().is_err());
}

