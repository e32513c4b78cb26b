//! Report bundle: CSV tables and renderer-agnostic plot data per figure.
//!
//! Every file carries the run id and config hash of the run directory it
//! was built from.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::domain::{Claim, ClusterAssignment, DiversityReport, GenerationSetting};
use crate::io::{self, IoError};
use crate::pipeline::{
    group_cells, JsdReport, RepresentativenessRecord, RunInfo, CLAIMS, CLUSTERS, DIVERSITY, JSD_MATRIX, REPORT_DIR,
    REPRESENTATIVENESS, RUN_INFO,
};
use crate::seed;
use crate::stats::bootstrap_ci;

/// Clusters listed per cell in the top-cluster histogram.
pub const TOP_CLUSTERS: usize = 10;
const BOOTSTRAP_RESAMPLES: usize = 1000;
const BOOTSTRAP_LEVEL: f64 = 0.95;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report needs {} which does not exist", .0.display())]
    MissingInput(PathBuf),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportBundle {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorSeries {
    pub generator_id: String,
    pub setting: GenerationSetting,
    pub topics: usize,
    pub mean_hsd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterBar {
    pub cluster_id: usize,
    pub count: u64,
    /// First claim of the cluster in claim order.
    pub example: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellHistogram {
    pub topic_id: String,
    pub generator_id: String,
    pub setting: GenerationSetting,
    pub n: u64,
    pub clusters: Vec<ClusterBar>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountryBar {
    pub country: String,
    pub generator_id: String,
    pub setting: GenerationSetting,
    pub topics: usize,
    pub mean_hsd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepresentBar {
    pub topic_id: String,
    pub generator_id: String,
    pub setting: GenerationSetting,
    pub language: String,
    pub matched_claims: u64,
    pub hsd: f64,
}

#[derive(Serialize)]
struct PlotData<'a, T> {
    run_id: &'a str,
    config_hash: &'a str,
    figure: &'a str,
    series: T,
}

struct Writer<'a> {
    dir: PathBuf,
    info: &'a RunInfo,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn json<T: Serialize>(&mut self, name: &str, figure: &str, series: T) -> Result<(), ReportError> {
        let path = self.dir.join(name);
        let data = PlotData { run_id: &self.info.run_id, config_hash: &self.info.config_hash, figure, series };
        io::write_json(&path, &data)?;
        self.files.push(path);
        Ok(())
    }

    /// Writes a CSV whose first two columns are run id and config hash.
    fn csv(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), ReportError> {
        let path = self.dir.join(name);
        let mut out = csv::Writer::from_writer(Vec::new());
        let mut head = vec!["run_id", "config_hash"];
        head.extend_from_slice(header);
        out.write_record(&head)?;
        for row in rows {
            let mut full = vec![self.info.run_id.clone(), self.info.config_hash.clone()];
            full.extend(row);
            out.write_record(&full)?;
        }
        let bytes = out.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        io::write_text(&path, &String::from_utf8(bytes).expect("csv output is UTF-8"))?;
        self.files.push(path);
        Ok(())
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-generator mean of per-topic HSD with a bootstrap CI over topics.
pub fn generator_series(reports: &[DiversityReport], seed: u64) -> Vec<GeneratorSeries> {
    let mut groups: BTreeMap<(String, GenerationSetting), Vec<f64>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.generator_id.clone(), r.setting)).or_default().push(r.hsd);
    }
    groups
        .into_iter()
        .map(|((generator_id, setting), values)| {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let cell_seed = seed::derive_seed(seed, "report", &format!("{generator_id}/{setting}"));
            let (lo, hi) = bootstrap_ci(&values, BOOTSTRAP_RESAMPLES, BOOTSTRAP_LEVEL, cell_seed).unwrap_or((mean, mean));
            GeneratorSeries { generator_id, setting, topics: values.len(), mean_hsd: mean, ci_low: lo, ci_high: hi }
        })
        .collect()
}

/// The `TOP_CLUSTERS` largest clusters of every cell, by descending count
/// (ties by cluster id).
pub fn top_clusters(claims: Vec<Claim>, assignments: &[ClusterAssignment]) -> Vec<CellHistogram> {
    let of: HashMap<&str, usize> = assignments.iter().map(|a| (a.claim_id.as_str(), a.cluster_id)).collect();
    let mut out = Vec::new();
    for (cell, claims) in group_cells(claims) {
        let mut bars: BTreeMap<usize, ClusterBar> = BTreeMap::new();
        for c in &claims {
            let Some(&id) = of.get(c.id.as_str()) else { continue };
            bars.entry(id).or_insert_with(|| ClusterBar { cluster_id: id, count: 0, example: c.text.clone() }).count += 1;
        }
        let n = bars.values().map(|b| b.count).sum();
        let mut bars: Vec<ClusterBar> = bars.into_values().collect();
        bars.sort_by(|a, b| b.count.cmp(&a.count).then(a.cluster_id.cmp(&b.cluster_id)));
        bars.truncate(TOP_CLUSTERS);
        out.push(CellHistogram {
            topic_id: cell.topic_id,
            generator_id: cell.generator_id,
            setting: cell.setting,
            n,
            clusters: bars,
        });
    }
    out
}

fn country_bars(reports: &[DiversityReport], info: &RunInfo) -> Vec<CountryBar> {
    let country: HashMap<&str, &str> =
        info.topics.iter().filter_map(|t| t.country.as_deref().map(|c| (t.id.as_str(), c))).collect();
    let mut groups: BTreeMap<(String, String, GenerationSetting), Vec<f64>> = BTreeMap::new();
    for r in reports {
        if let Some(c) = country.get(r.topic_id.as_str()) {
            groups.entry((c.to_string(), r.generator_id.clone(), r.setting)).or_default().push(r.hsd);
        }
    }
    groups
        .into_iter()
        .map(|((country, generator_id, setting), v)| CountryBar {
            country,
            generator_id,
            setting,
            topics: v.len(),
            mean_hsd: v.iter().sum::<f64>() / v.len() as f64,
        })
        .collect()
}

fn summary_markdown(info: &RunInfo, reports: &[DiversityReport], series: &[GeneratorSeries], jsd: Option<&JsdReport>) -> String {
    let mut s = String::new();
    s.push_str(&format!("# Run {}\n\n", info.run_id));
    s.push_str(&format!("- config hash: `{}`\n", info.config_hash));
    s.push_str(&format!("- tool version: {} (schema {})\n", info.tool_version, info.schema_version));
    s.push_str(&format!("- seed: {}\n", info.seed));
    s.push_str(&format!("- diversity cells: {}\n", reports.len()));
    let rarefied = reports.iter().filter(|r| r.rarefied_to_coverage.is_some()).count();
    s.push_str(&format!("- rarefied cells: {rarefied}\n\n"));
    s.push_str("## Mean HSD per generator\n\n| generator | setting | topics | mean HSD | 95% CI |\n|---|---|---|---|---|\n");
    let mut ranked: Vec<&GeneratorSeries> = series.iter().collect();
    ranked.sort_by(|a, b| b.mean_hsd.total_cmp(&a.mean_hsd));
    for g in &ranked {
        s.push_str(&format!(
            "| {} | {} | {} | {:.3} | [{:.3}, {:.3}] |\n",
            g.generator_id, g.setting, g.topics, g.mean_hsd, g.ci_low, g.ci_high
        ));
    }
    if let (Some(hi), Some(lo)) = (ranked.first(), ranked.last()) {
        s.push_str(&format!(
            "\nMost diverse: {} ({}, {:.3}). Least diverse: {} ({}, {:.3}).\n",
            hi.generator_id, hi.setting, hi.mean_hsd, lo.generator_id, lo.setting, lo.mean_hsd
        ));
    }
    if let Some(j) = jsd {
        let mut best: Option<(f64, &str, &str, &str)> = None;
        for t in &j.topics {
            for (a, row) in t.matrix.iter().enumerate() {
                for (b, &d) in row.iter().enumerate().skip(a + 1) {
                    if best.is_none_or(|x| d > x.0) {
                        best = Some((d, &t.topic_id, &t.labels[a], &t.labels[b]));
                    }
                }
            }
        }
        if let Some((d, t, a, b)) = best {
            s.push_str(&format!("\nLargest JSD: {d:.4} nats between {a} and {b} on topic {t}.\n"));
        }
    }
    s
}

/// Builds the report bundle under `<run_dir>/report/`.
pub fn emit_report(run_dir: &Path) -> Result<ReportBundle, ReportError> {
    let need = |name: &str| {
        let p = run_dir.join(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(ReportError::MissingInput(p))
        }
    };
    let info: RunInfo = io::read_json(&need(RUN_INFO)?)?;
    let reports: Vec<DiversityReport> = io::read_jsonl(&need(DIVERSITY)?)?;
    let dir = run_dir.join(REPORT_DIR);
    fs::create_dir_all(&dir).map_err(|source| IoError::Io { path: dir.clone(), source })?;
    let mut w = Writer { dir: dir.clone(), info: &info, files: Vec::new() };

    let rows = reports
        .iter()
        .map(|r| {
            vec![
                r.topic_id.clone(),
                r.generator_id.clone(),
                r.setting.to_string(),
                r.n.to_string(),
                r.num_classes.to_string(),
                r.f1.to_string(),
                r.f2.to_string(),
                r.coverage.to_string(),
                r.hsd.to_string(),
                r.hsd_unrarefied.to_string(),
                opt(r.ci_low),
                opt(r.ci_high),
                opt(r.rarefied_to_coverage),
                r.flags.join(";"),
            ]
        })
        .collect();
    w.csv(
        "hsd_table.csv",
        &[
            "topic_id",
            "generator_id",
            "setting",
            "n",
            "num_classes",
            "f1",
            "f2",
            "coverage",
            "hsd",
            "hsd_unrarefied",
            "ci_low",
            "ci_high",
            "rarefied_to_coverage",
            "flags",
        ],
        rows,
    )?;

    let series = generator_series(&reports, info.seed);
    let rows = series
        .iter()
        .map(|g| {
            vec![
                g.generator_id.clone(),
                g.setting.to_string(),
                g.topics.to_string(),
                g.mean_hsd.to_string(),
                g.ci_low.to_string(),
                g.ci_high.to_string(),
            ]
        })
        .collect();
    w.csv("generator_hsd.csv", &["generator_id", "setting", "topics", "mean_hsd", "ci_low", "ci_high"], rows)?;
    w.json("generator_hsd.json", "generator_hsd", &series)?;

    if run_dir.join(CLAIMS).exists() && run_dir.join(CLUSTERS).exists() {
        let claims: Vec<Claim> = io::read_jsonl(&run_dir.join(CLAIMS))?;
        let assignments: Vec<ClusterAssignment> = io::read_jsonl(&run_dir.join(CLUSTERS))?;
        w.json("top_clusters.json", "top_clusters", top_clusters(claims, &assignments))?;
    }

    let jsd: Option<JsdReport> =
        if run_dir.join(JSD_MATRIX).exists() { Some(io::read_json(&run_dir.join(JSD_MATRIX))?) } else { None };
    if let Some(j) = &jsd {
        w.json("jsd_heatmap.json", "jsd_heatmap", &j.topics)?;
    }

    let countries = country_bars(&reports, &info);
    if !countries.is_empty() {
        let rows = countries
            .iter()
            .map(|c| {
                vec![
                    c.country.clone(),
                    c.generator_id.clone(),
                    c.setting.to_string(),
                    c.topics.to_string(),
                    c.mean_hsd.to_string(),
                ]
            })
            .collect();
        w.csv("country_hsd.csv", &["country", "generator_id", "setting", "topics", "mean_hsd"], rows)?;
        w.json("country_hsd.json", "country_hsd", &countries)?;
    }

    if run_dir.join(REPRESENTATIVENESS).exists() {
        let recs: Vec<RepresentativenessRecord> = io::read_jsonl(&run_dir.join(REPRESENTATIVENESS))?;
        let bars: Vec<RepresentBar> = recs
            .iter()
            .map(|r| RepresentBar {
                topic_id: r.report.topic_id.clone(),
                generator_id: r.report.generator_id.clone(),
                setting: r.report.setting,
                language: r.language.clone(),
                matched_claims: r.report.n,
                hsd: r.report.hsd,
            })
            .collect();
        let rows = bars
            .iter()
            .map(|b| {
                vec![
                    b.topic_id.clone(),
                    b.generator_id.clone(),
                    b.setting.to_string(),
                    b.language.clone(),
                    b.matched_claims.to_string(),
                    b.hsd.to_string(),
                ]
            })
            .collect();
        w.csv(
            "representativeness_by_language.csv",
            &["topic_id", "generator_id", "setting", "language", "matched_claims", "hsd"],
            rows,
        )?;
        w.json("representativeness_by_language.json", "representativeness", &bars)?;
    }

    let path = dir.join("summary.md");
    io::write_text(&path, &summary_markdown(&info, &reports, &series, jsd.as_ref()))?;
    w.files.push(path);
    Ok(ReportBundle { dir, files: w.files })
}
