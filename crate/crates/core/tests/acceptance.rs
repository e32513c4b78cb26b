//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use epidiv_core::backend::mock::{parse_tag, MockEmbedder, MockEntailer, MockGenerator, MockSpec};
use epidiv_core::backend::{
    BackendError, Embedder, EmbeddingVector, Entailer, EntailmentJudgment, GenerationRequest, Generator,
};
use epidiv_core::clustering::{cluster_claims, split_large_clusters, ClusterParams};
use epidiv_core::domain::{Claim, GenerationSetting, MeaningClassTable, ResponseRef};
use epidiv_core::io;
use epidiv_core::manifest::{mock_manifest, RunManifest};
use epidiv_core::oracle::{render_tagged, sample_population, true_coverage, Family, PopulationSpec, DEFAULT_TAG_SYNTAX};
use epidiv_core::pipeline::{Backends, JsdReport, Pipeline, RunOptions, Stage, DIVERSITY, JSD_MATRIX};
use epidiv_core::represent::{match_claims, minimal_representativeness_hsd, MatchRecord, ReferenceClaim};
use epidiv_core::retrieval::{assemble_context, context_order, estimate_tokens, Paragraph};
use epidiv_core::stats::{
    coverage, coverage_from_counts, hill_diversity, hsd, jsd, jsd_matrix, rarefied_hsd, rarefy_to_coverage,
    GeneratorClaims, JsdMatrix, RarefactionPlan, StatsError,
};
use epidiv_core::{seed, AbundanceVector, DiversityReport, Execution};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.1?}, limit {limit:?}"))
}

fn av(counts: &[u64]) -> AbundanceVector {
    AbundanceVector::new(counts.to_vec()).unwrap()
}

fn tagged_claims(classes: &[usize], topic: &str, generator: &str) -> Vec<Claim> {
    let r = ResponseRef {
        generator_id: generator.into(),
        prompt_id: Some("p".into()),
        setting: GenerationSetting::Ift,
        seed: 0,
    };
    classes
        .iter()
        .enumerate()
        .map(|(i, &c)| Claim {
            id: Claim::make_id(topic, &r, 0, i as u32),
            topic_id: topic.into(),
            response_ref: r.clone(),
            chunk_index: 0,
            line_index: i as u32,
            text: render_tagged(DEFAULT_TAG_SYNTAX, c, i as u64),
        })
        .collect()
}

fn embedder() -> MockEmbedder {
    MockEmbedder::new(MockSpec::default()).with_batch(usize::MAX)
}

fn embed(texts: &[String]) -> Vec<EmbeddingVector> {
    embedder().embed_batch(texts).unwrap()
}

fn claim_texts(claims: &[Claim]) -> Vec<String> {
    claims.iter().map(|c| c.text.clone()).collect()
}

// 1

fn hill() -> Verdict {
    let start = Instant::now();
    for s in [1usize, 2, 7, 100, 1000] {
        let d = hsd(&av(&vec![3; s])).unwrap();
        ensure((d - s as f64).abs() <= 1e-9, || format!("uniform {s}: {d}"))?;
    }
    let d = hsd(&av(&[42])).unwrap();
    ensure((d - 1.0).abs() <= 1e-9, || format!("single class: {d}"))?;
    let d = hsd(&av(&[2, 1, 1])).unwrap();
    ensure((d - 2f64.powf(1.5)).abs() <= 1e-9, || format!("[2,1,1]: {d}"))?;

    let deviation = |v: &AbundanceVector| {
        let d0 = hsd(v).unwrap();
        [1e-6, -1e-6].iter().map(|&l| (hill_diversity(v, l).unwrap() - d0).abs()).fold(0.0, f64::max)
    };
    let mut rng = seed::rng(1);
    let mut random = 0.0f64;
    for _ in 0..200 {
        let s = rng.gen_range(1..=1000);
        let counts: Vec<u64> = (0..s).map(|_| rng.gen_range(1..500)).collect();
        random = random.max(deviation(&av(&counts)));
        let mut doubled = counts.clone();
        doubled.extend(&counts);
        let (d1, d2) = (hsd(&av(&counts)).unwrap(), hsd(&av(&doubled)).unwrap());
        ensure((d2 - 2.0 * d1).abs() <= 1e-9, || format!("replication: {d2} vs 2*{d1}"))?;
    }
    // half the mass on one class, the rest spread over 999 singletons
    let mut skewed = vec![999u64];
    skewed.extend(std::iter::repeat_n(1, 999));
    let skewed = deviation(&av(&skewed));
    within(start, Duration::from_secs(1))?;
    let detail = format!("max |D(+-1e-6) - D(0)|: random S <= 1000 {random:.3e}, skewed S = 1000 {skewed:.3e}");
    ensure(random.max(skewed) <= 1e-4, || format!("continuity bound 1e-4 exceeded; {detail}"))?;
    Ok(detail)
}

// 2

fn coverage_criterion() -> Verdict {
    let start = Instant::now();
    let fixtures = [(coverage_from_counts(10, 10, 0).value, 0.0), (coverage_from_counts(10, 0, 3).value, 1.0)];
    for (got, want) in fixtures {
        ensure((got - want).abs() <= 1e-12, || format!("fixture {want}: {got}"))?;
    }
    let got = coverage_from_counts(10, 2, 1).value;
    ensure((got - 0.82).abs() <= 1e-12, || format!("fixture 0.82: {got}"))?;
    let got = coverage(&av(&[1, 1, 2, 3, 3])).value;
    ensure((got - 0.82).abs() <= 1e-12, || format!("fixture 0.82 via abundance: {got}"))?;

    let mut err = 0.0;
    for s in 0..50u64 {
        let spec = PopulationSpec {
            family: Family::Zipf { classes: 1000, exponent: 1.1 },
            n_samples: 1000,
            seed: s,
            tag_syntax: DEFAULT_TAG_SYNTAX.into(),
        };
        let sample = sample_population(&spec).unwrap();
        let est = coverage(&AbundanceVector::from_labels(&sample.classes)).value;
        err += (est - true_coverage(&sample.distribution, sample.classes.iter().copied())).abs();
    }
    let mean = err / 50.0;
    ensure(mean <= 0.05, || format!("calibration mean error {mean}"))?;
    within(start, Duration::from_secs(10))?;
    Ok(format!("calibration mean error {mean:.4}"))
}

// 3

fn sorted_counts(v: &AbundanceVector) -> Vec<u64> {
    let mut c = v.counts().to_vec();
    c.sort_unstable();
    c
}

fn rarefaction() -> Verdict {
    let start = Instant::now();
    let sample = sample_population(&PopulationSpec {
        family: Family::Zipf { classes: 50, exponent: 1.1 },
        n_samples: 400,
        seed: 3,
        tag_syntax: DEFAULT_TAG_SYNTAX.into(),
    })
    .unwrap();
    let full = AbundanceVector::from_labels(&sample.classes);
    let full_cov = coverage(&full).value;
    for v in rarefy_to_coverage(&sample.classes, &RarefactionPlan::new(full_cov, 5)).unwrap() {
        ensure(sorted_counts(&v) == sorted_counts(&full), || "target = full coverage changed the sample".into())?;
    }

    let two: Vec<usize> = (0..1000).map(|i| i % 2).collect();
    let rarefied = rarefy_to_coverage(&two, &RarefactionPlan::new(0.5, 5)).unwrap();
    let mean_n = rarefied.iter().map(|v| v.n() as f64).sum::<f64>() / rarefied.len() as f64;
    ensure(mean_n < 1000.0, || format!("[500,500] at 0.5: mean prefix {mean_n}"))?;

    let singletons: Vec<usize> = (0..20).collect();
    let res = rarefy_to_coverage(&singletons, &RarefactionPlan::new(0.5, 5));
    ensure(matches!(res, Err(StatsError::TargetUnreachable { .. })), || format!("all singletons: {res:?}"))?;

    let mut correct = 0;
    for trial in 0..100u64 {
        let draw = |classes: usize, salt: u64| {
            sample_population(&PopulationSpec {
                family: Family::Uniform { classes },
                n_samples: 300,
                seed: seed::sub_seed(trial, salt),
                tag_syntax: DEFAULT_TAG_SYNTAX.into(),
            })
            .unwrap()
            .classes
        };
        let (low, high) = (draw(10, 0), draw(100, 1));
        let cov = |l: &[usize]| coverage(&AbundanceVector::from_labels(l)).value;
        let target = cov(&low).min(cov(&high));
        let mean = |l: &[usize], salt: u64| {
            let plan = RarefactionPlan::new(target, seed::sub_seed(trial, salt));
            rarefied_hsd(&rarefy_to_coverage(l, &plan).unwrap()).unwrap().mean
        };
        if mean(&high, 2) > mean(&low, 3) {
            correct += 1;
        }
    }
    ensure(correct >= 95, || format!("ordering correct in {correct}/100"))?;
    within(start, Duration::from_secs(60))?;
    Ok(format!("ordering correct in {correct}/100"))
}

// 4

fn same_partition(table: &MeaningClassTable, claims: &[Claim], truth: &HashMap<String, usize>) -> bool {
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    let of = table.cluster_of();
    claims.iter().all(|c| {
        let (label, class) = (of[c.id.as_str()], truth[&c.id]);
        *fwd.entry(label).or_insert(class) == class && *back.entry(class).or_insert(label) == label
    })
}

fn clustering() -> Verdict {
    let start = Instant::now();
    let entailer = MockEntailer::new(MockSpec::default());
    let params = ClusterParams::default();
    for n in [100usize, 500, 2000] {
        let spec = PopulationSpec {
            family: Family::Zipf { classes: n / 4, exponent: 1.1 },
            n_samples: n,
            seed: n as u64,
            tag_syntax: DEFAULT_TAG_SYNTAX.into(),
        };
        let classes = sample_population(&spec).unwrap().classes;
        let claims = tagged_claims(&classes, "t", "g");
        let truth: HashMap<String, usize> = claims.iter().map(|c| c.id.clone()).zip(classes.iter().copied()).collect();
        let emb = embed(&claim_texts(&claims));
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seed::rng(n as u64);
        for perm in 0..20 {
            order.shuffle(&mut rng);
            let c: Vec<Claim> = order.iter().map(|&i| claims[i].clone()).collect();
            let e: Vec<EmbeddingVector> = order.iter().map(|&i| emb[i].clone()).collect();
            let table = cluster_claims(&c, &e, &entailer, &params).map_err(|e| e.to_string())?;
            ensure(same_partition(&table, &c, &truth), || format!("n={n} permutation {perm}: partition differs"))?;
        }
    }

    let texts: Vec<String> =
        (0..60).map(|i| format!("Claim {i} [[k1@{}]]", if i < 30 { 100 } else { 200 })).collect();
    let ids: Vec<String> = (0..60).map(|i| format!("c{i}")).collect();
    let table = MeaningClassTable::from_labels(&ids, &[0; 60]).unwrap();
    let (split, _) = split_large_clusters(&table, &embed(&texts), &params, Execution::default())
        .map_err(|e| e.to_string())?;
    let labels = split.labels();
    let halves = labels[..30].iter().all(|&l| l == labels[0]) && labels[30..].iter().all(|&l| l == labels[30]);
    ensure(split.num_clusters() == 2 && halves && labels[0] != labels[30], || {
        format!("two-geometry fixture split into {:?}", split.counts)
    })?;
    within(start, Duration::from_secs(120))?;
    Ok("3 sizes x 20 permutations exact; fixture split 30/30".into())
}

// 5

fn check_matrix(m: &JsdMatrix) -> Result<(), String> {
    check_rows(&m.labels, &m.matrix)
}

fn check_rows(labels: &[String], matrix: &[Vec<f64>]) -> Result<(), String> {
    for (i, row) in matrix.iter().enumerate() {
        ensure(row.len() == labels.len() && row[i] == 0.0, || format!("{labels:?}: bad row {i}"))?;
        for (j, &x) in row.iter().enumerate() {
            ensure(x == matrix[j][i], || format!("{labels:?}: asymmetric at ({i},{j})"))?;
        }
    }
    Ok(())
}

fn jsd_criterion() -> Verdict {
    let d = jsd(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
    ensure(d.abs() <= 1e-9, || format!("identical: {d}"))?;
    let d = jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
    ensure((d - std::f64::consts::LN_2).abs() <= 1e-9, || format!("disjoint: {d}"))?;
    // mixture (3/4, 1/4)
    let exact = 0.5 * (4.0f64 / 3.0).ln() + 0.25 * (2.0f64 / 3.0).ln() + 0.25 * 2f64.ln();
    let d = jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
    ensure((d - exact).abs() <= 1e-9, || format!("(1,0) vs (1/2,1/2): {d}, exact {exact}"))?;
    ensure(format!("{d:.6}") == "0.215762", || format!("(1,0) vs (1/2,1/2): {d:.9}"))?;

    let mut matrices = 0;
    let emb = embedder();
    let entailer = MockEntailer::new(MockSpec::default());
    for trial in 0..5u64 {
        let mut rng = seed::rng(trial);
        let sets: Vec<GeneratorClaims> = (0..4)
            .map(|g| {
                let classes: Vec<usize> = (0..60).map(|_| rng.gen_range(0..8 + 4 * g)).collect();
                GeneratorClaims { id: format!("g{g}"), claims: tagged_claims(&classes, "t", &format!("g{g}")) }
            })
            .collect();
        check_matrix(&jsd_matrix(&sets, &emb, &entailer, &ClusterParams::default()).map_err(|e| e.to_string())?)?;
        matrices += 1;
    }
    let tmp = tempfile::tempdir().unwrap();
    let m = mock_manifest(
        "jsd",
        tmp.path(),
        &[
            ("a", Family::Uniform { classes: 4 }),
            ("b", Family::Uniform { classes: 9 }),
            ("c", Family::Zipf { classes: 20, exponent: 1.1 }),
        ],
    );
    let p = run_stages(&m, &[Stage::Generate, Stage::Decompose, Stage::Compare])?;
    let report: JsdReport = io::read_json(&p.join(JSD_MATRIX)).map_err(|e| e.to_string())?;
    for t in &report.topics {
        check_rows(&t.labels, &t.matrix)?;
        matrices += 1;
    }
    Ok(format!("fixtures exact; {matrices} matrices symmetric with zero diagonal"))
}

// 6

fn run_stages(m: &RunManifest, stages: &[Stage]) -> Result<PathBuf, String> {
    for &s in stages {
        let p = Pipeline::new(m.clone(), RunOptions::default()).map_err(|e| e.to_string())?;
        let summary = p.run(s).map_err(|e| format!("{s}: {e}"))?;
        ensure(summary.failures == 0, || format!("{s}: {} failures", summary.failures))?;
    }
    Ok(m.run_dir())
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn diff_trees(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) -> Result<(), String> {
    let names = |t: &BTreeMap<PathBuf, Vec<u8>>| t.keys().cloned().collect::<BTreeSet<_>>();
    ensure(names(a) == names(b), || format!("file sets differ: {:?} vs {:?}", names(a), names(b)))?;
    match a.iter().find(|(k, v)| b[*k] != **v) {
        Some((k, _)) => Err(format!("{} differs", k.display())),
        None => Ok(()),
    }
}

fn end_to_end() -> Verdict {
    let start = Instant::now();
    let core = [Stage::Generate, Stage::Decompose, Stage::Cluster, Stage::Diversity];
    let mut margins = Vec::new();
    for s in 1..=10u64 {
        let mut runs = Vec::new();
        for _ in 0..2 {
            let tmp = tempfile::tempdir().unwrap();
            let mut m = mock_manifest(
                "e2e",
                tmp.path(),
                &[("A", Family::Uniform { classes: 5 }), ("B", Family::Uniform { classes: 15 })],
            );
            m.seed = s;
            runs.push(tree(&run_stages(&m, &core)?));
        }
        diff_trees(&runs[0], &runs[1]).map_err(|e| format!("seed {s}: {e}"))?;
        let reports: Vec<DiversityReport> = String::from_utf8_lossy(&runs[0][Path::new(DIVERSITY)])
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        for topic in ["t1", "t2"] {
            let get = |g: &str| reports.iter().find(|r| r.topic_id == topic && r.generator_id == g).map(|r| r.hsd);
            let (a, b) = (get("A").ok_or("missing A")?, get("B").ok_or("missing B")?);
            ensure(b > a, || format!("seed {s} {topic}: HSD(B) {b} <= HSD(A) {a}"))?;
            margins.push(b / a);
        }
    }
    within(start, Duration::from_secs(300))?;
    let min = margins.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!("10/10 seeds, min HSD(B)/HSD(A) {min:.2}, byte-identical reruns"))
}

// 7

fn rag() -> Verdict {
    let mut rng = seed::rng(7);
    let paragraphs: Vec<Paragraph> = (0..500)
        .map(|i| {
            let class = rng.gen_range(0..25);
            let len = rng.gen_range(0..6000);
            Paragraph {
                id: format!("pg{i}"),
                page_ref: "t/0".into(),
                index: i,
                text: format!("{} {}", render_tagged(DEFAULT_TAG_SYNTAX, class, i as u64), "w".repeat(len)),
            }
        })
        .collect();
    let emb = embed(&paragraphs.iter().map(|p| p.text.clone()).collect::<Vec<_>>());
    let mut contexts = 0;
    for q in 0..400u64 {
        let query = embed(&[render_tagged(DEFAULT_TAG_SYNTAX, rng.gen_range(0..25), 1_000_000 + q)]).remove(0);
        let floor = if q % 2 == 0 { 0.35 } else { rng.gen_range(-0.2..0.99) };
        let ctx = assemble_context("p", &query, &paragraphs, &emb, floor, 1000, q).unwrap();
        contexts += 1;
        ensure(ctx.token_estimate <= 1000 && estimate_tokens(&ctx.text) <= 1000, || {
            format!("query {q}: {} tokens", estimate_tokens(&ctx.text))
        })?;
        let sims: Vec<f64> = emb.iter().map(|e| e.cosine(&query)).collect();
        let order = context_order(&sims, floor, q);
        let first_below = order.iter().position(|&i| sims[i] <= floor).unwrap_or(order.len());
        ensure(order[first_below..].iter().all(|&i| sims[i] <= floor), || format!("query {q}: floor violated"))?;
        ensure(order[first_below..].windows(2).all(|w| sims[w[0]] >= sims[w[1]]), || {
            format!("query {q}: tail not in similarity order")
        })?;
        let mut pos = order.iter();
        let subsequence = ctx.truncated
            || ctx.paragraph_ids.iter().all(|id| pos.any(|&i| &paragraphs[i].id == id));
        ensure(subsequence, || format!("query {q}: context does not follow the order"))?;
    }

    let query = embed(&["Unrelated query [[k999]]".to_string()]).remove(0);
    let sims: Vec<f64> = emb.iter().map(|e| e.cosine(&query)).collect();
    let mut ranked: Vec<usize> = (0..sims.len()).collect();
    ranked.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let floor = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-6;
    for s in 0..10 {
        ensure(context_order(&sims, floor, s) == ranked, || format!("no-op floor reordered with seed {s}"))?;
    }
    let a = assemble_context("p", &query, &paragraphs, &emb, floor, 1000, 1).unwrap();
    let b = assemble_context("p", &query, &paragraphs, &emb, floor, 1000, 2).unwrap();
    ensure(a == b, || "no-op floor context depends on the seed".into())?;
    Ok(format!("{contexts} contexts within budget; partition holds; no-op floor is pure ranking"))
}

// 8

fn representativeness() -> Verdict {
    let mut rng = seed::rng(8);
    let gen_classes: Vec<usize> = (0..500).map(|_| rng.gen_range(0..40)).collect();
    let generated = tagged_claims(&gen_classes, "t", "g");
    let references: Vec<ReferenceClaim> = (0..50)
        .map(|i| {
            let class = if i < 15 { gen_classes[rng.gen_range(0..500)] } else { 1000 + i };
            ReferenceClaim {
                id: format!("r{i:02}"),
                topic_id: "t".into(),
                language: "en".into(),
                text: format!("Reference {i} [[k{class}]]"),
            }
        })
        .collect();
    let top_k = 6;
    let emb = embedder();
    let entailer = MockEntailer::new(MockSpec::default());
    let matches = match_claims(&references, &generated, "en", &emb, &entailer, top_k, Execution::default())
        .map_err(|e| e.to_string())?;
    let got: BTreeSet<(String, String)> =
        matches.iter().map(|m| (m.reference_claim_id.clone(), m.generated_claim_id.clone())).collect();

    let gen_emb = embed(&claim_texts(&generated));
    let mut oracle = BTreeSet::new();
    for r in &references {
        let q = embed(std::slice::from_ref(&r.text)).remove(0);
        let mut ranked: Vec<usize> = (0..generated.len()).collect();
        ranked.sort_by(|&a, &b| gen_emb[b].cosine(&q).total_cmp(&gen_emb[a].cosine(&q)).then(a.cmp(&b)));
        let class = parse_tag(&r.text).unwrap().class;
        for &g in &ranked[..top_k] {
            if parse_tag(&generated[g].text).unwrap().class == class {
                oracle.insert((r.id.clone(), generated[g].id.clone()));
            }
        }
    }
    ensure(got == oracle, || format!("matched {} pairs, oracle {}", got.len(), oracle.len()))?;

    let ids: Vec<String> = (0..20).map(|i| format!("c{i}")).collect();
    let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
    let table = MeaningClassTable::from_labels(&ids, &labels).unwrap();
    let half: Vec<MatchRecord> = (0..20)
        .filter(|i| i % 4 < 2)
        .map(|i| MatchRecord {
            reference_claim_id: format!("r{i}"),
            generated_claim_id: format!("c{i}"),
            cosine: 1.0,
            mutual_entailment: true,
            language: "en".into(),
        })
        .collect();
    let report = minimal_representativeness_hsd(&table, &half, "en", "g", "t", GenerationSetting::Ift);
    ensure((report.hsd - 2.0).abs() <= 1e-9, || format!("half-matched uniform-4: {}", report.hsd))?;
    Ok(format!("{} pairs equal the oracle; half-matched HSD {}", got.len(), report.hsd))
}

// 9

/// Succeeds for `budget` calls, then fails every call.
struct Flaky<B> {
    inner: B,
    budget: AtomicU64,
}

impl<B> Flaky<B> {
    fn new(inner: B, budget: u64) -> Self {
        Flaky { inner, budget: AtomicU64::new(budget) }
    }

    fn spend(&self) -> Result<(), BackendError> {
        let left = self.budget.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1));
        left.map(|_| ()).map_err(|_| BackendError::Unavailable { attempts: 1, last: "killed".into() })
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

const ALL_STAGES: [Stage; 7] = [
    Stage::Generate,
    Stage::Decompose,
    Stage::Cluster,
    Stage::Diversity,
    Stage::Compare,
    Stage::Represent,
    Stage::Report,
];

fn resume_manifest(out: &Path, refs: &Path) -> RunManifest {
    let mut m = mock_manifest(
        "resume",
        out,
        &[("A", Family::Uniform { classes: 5 }), ("B", Family::Zipf { classes: 30, exponent: 1.1 })],
    );
    m.references_dir = Some(refs.to_path_buf());
    m
}

/// Runs `stage` with one backend that dies after `budget` calls, then
/// leaves a torn record at the end of the stage's append log.
fn interrupted(m: &RunManifest, stage: Stage, budget: u64) -> Result<(), String> {
    let mut b = Backends::from_manifest(m).map_err(|e| e.to_string())?;
    let torn = match stage {
        Stage::Generate => {
            for g in &m.generators {
                let spec = g.backend.mock.clone().unwrap();
                b.generators.insert(g.id.clone(), Arc::new(Flaky::new(MockGenerator::new(spec), budget)));
            }
            Some("responses.jsonl")
        }
        Stage::Decompose => {
            let spec = m.decomposer.mock.clone().unwrap();
            b.decomposer = Arc::new(Flaky::new(MockGenerator::new(spec), budget));
            Some("claims.jsonl")
        }
        Stage::Cluster | Stage::Compare | Stage::Represent => {
            let spec = m.entailment.mock.clone().unwrap();
            b.entailer = Arc::new(Flaky::new(MockEntailer::new(spec), budget * 40));
            (stage == Stage::Cluster).then_some("clusters.jsonl")
        }
        _ => None,
    };
    let opts = RunOptions { exec: Execution::Sequential, ..RunOptions::default() };
    Pipeline::with_backends(m.clone(), opts, b).run(stage).map_err(|e| format!("{stage}: {e}"))?;
    if let Some(name) = torn {
        use std::io::Write;
        let mut f = fs::OpenOptions::new().append(true).create(true).open(m.run_dir().join(name)).unwrap();
        f.write_all(b"{\"id\":\"torn\",\"text\":\"half a rec").unwrap();
    }
    Ok(())
}

fn resume() -> Verdict {
    let base = tempfile::tempdir().unwrap();
    let refs = base.path().join("refs");
    for topic in ["t1", "t2"] {
        let claims: Vec<ReferenceClaim> = (0..12)
            .map(|c| ReferenceClaim {
                id: format!("{topic}-r{c}"),
                topic_id: topic.into(),
                language: "en".into(),
                text: format!("Reference item {c} [[k{}]]", if c % 2 == 0 { c } else { 10_000 + c }),
            })
            .collect();
        fs::create_dir_all(refs.join(topic)).unwrap();
        io::write_jsonl(&refs.join(topic).join("en.jsonl"), &claims).unwrap();
    }
    let clean = tree(&run_stages(&resume_manifest(&base.path().join("clean"), &refs), &ALL_STAGES)?);
    let jsd: JsdReport = serde_json::from_slice(&clean[Path::new(JSD_MATRIX)]).map_err(|e| e.to_string())?;
    for t in &jsd.topics {
        check_rows(&t.labels, &t.matrix)?;
    }

    let mut rng = seed::rng(9);
    let mut stops: Vec<usize> = (0..ALL_STAGES.len()).collect();
    stops.shuffle(&mut rng);
    let mut log = Vec::new();
    for (trial, &stop) in stops[..5].iter().enumerate() {
        let m = resume_manifest(&base.path().join(format!("trial{trial}")), &refs);
        run_stages(&m, &ALL_STAGES[..stop])?;
        let stage = ALL_STAGES[stop];
        let kill = !matches!(stage, Stage::Diversity | Stage::Report);
        if kill {
            interrupted(&m, stage, rng.gen_range(0..20))?;
        }
        run_stages(&m, &ALL_STAGES[stop..])?;
        diff_trees(&clean, &tree(&m.run_dir())).map_err(|e| format!("trial {trial} ({stage}, kill {kill}): {e}"))?;
        log.push(format!("{stage}{}", if kill { "*" } else { "" }));
    }
    Ok(format!("5/5 trials byte-identical, stopped at [{}] (* = killed mid-stage)", log.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("hill diversity", hill),
        ("coverage estimator", coverage_criterion),
        ("rarefaction", rarefaction),
        ("clustering oracle", clustering),
        ("jensen-shannon divergence", jsd_criterion),
        ("end-to-end mock pipeline", end_to_end),
        ("rag context builder", rag),
        ("representativeness", representativeness),
        ("determinism and resume", resume),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let t = start.elapsed();
        match verdict {
            Ok(detail) => println!("PASS {} {name} ({t:.1?}): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name} ({t:.1?}): {detail}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
