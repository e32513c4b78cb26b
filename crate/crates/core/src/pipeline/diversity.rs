use std::collections::{BTreeMap, HashMap};

use super::{group_cells, CellKey, Pipeline, PipelineError, Stage, StageSummary, CLAIMS, CLUSTERS, DIVERSITY};
use crate::domain::{AbundanceVector, ClusterAssignment, DiversityReport, GenerationSetting};
use crate::exec::Execution;
use crate::io;
use crate::manifest::{BootstrapConfig, RarefactionConfig};
use crate::seed;
use crate::stats::{bootstrap_ci_with, coverage, hsd, rarefied_hsd, rarefy_to_coverage_with, RarefactionPlan, StatsError};

/// Rarefaction target of each topic: the configured value, or else the
/// lowest defined coverage among the topic's generator (non-SEARCH) cells.
fn topic_targets(cells: &BTreeMap<CellKey, Vec<usize>>, config: &RarefactionConfig) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    let mut fallback: BTreeMap<String, f64> = BTreeMap::new();
    for (key, labels) in cells {
        let cov = coverage(&AbundanceVector::from_labels(labels));
        if !cov.defined {
            continue;
        }
        let slot = if key.setting == GenerationSetting::Search { &mut fallback } else { &mut out };
        let t = slot.entry(key.topic_id.clone()).or_insert(cov.value);
        *t = t.min(cov.value);
    }
    for (topic, t) in fallback {
        out.entry(topic).or_insert(t);
    }
    if let Some(fixed) = config.target_coverage {
        out.values_mut().for_each(|t| *t = fixed);
    }
    out
}

/// Diversity reports for labelled cells, rarefied per topic to a common
/// coverage. `labels` hold each claim's meaning class within its cell.
pub fn diversity_reports(
    cells: &BTreeMap<CellKey, Vec<usize>>,
    rarefaction: &RarefactionConfig,
    bootstrap: &BootstrapConfig,
    root_seed: u64,
    exec: Execution,
) -> Vec<DiversityReport> {
    let targets = topic_targets(cells, rarefaction);
    let keys: Vec<(&CellKey, &Vec<usize>)> = cells.iter().collect();
    exec.map_slice(&keys, |(key, labels)| {
        let seed = seed::derive_seed(root_seed, Stage::Diversity.as_str(), &key.to_string());
        let target = targets.get(&key.topic_id).copied();
        cell_report(key, labels, target, rarefaction, bootstrap, seed, exec)
    })
}

fn cell_report(
    key: &CellKey,
    labels: &[usize],
    target: Option<f64>,
    rarefaction: &RarefactionConfig,
    bootstrap: &BootstrapConfig,
    seed: u64,
    exec: Execution,
) -> DiversityReport {
    let v = AbundanceVector::from_labels(labels);
    let cov = coverage(&v);
    let point = hsd(&v).unwrap_or(0.0);
    let mut report = DiversityReport {
        generator_id: key.generator_id.clone(),
        topic_id: key.topic_id.clone(),
        setting: key.setting,
        n: v.n(),
        num_classes: v.num_classes() as u64,
        f1: v.f1(),
        f2: v.f2(),
        coverage: cov.value,
        hsd: point,
        ci_low: None,
        ci_high: None,
        rarefied_to_coverage: None,
        hsd_unrarefied: point,
        hsd_sd: None,
        resamples: None,
        seed: None,
        flags: Vec::new(),
    };
    if v.is_empty() {
        report.flags.push("Empty".into());
        return report;
    }
    if !cov.defined {
        report.flags.push("CoverageUndefined".into());
        return report;
    }
    let Some(target) = target else {
        report.flags.push("NoTarget".into());
        return report;
    };
    if key.setting == GenerationSetting::Search && rarefaction.search_exemption && cov.value <= target {
        report.flags.push("SearchExempt".into());
        return report;
    }
    if target <= 0.0 {
        report.flags.push("TargetZero".into());
        return report;
    }
    let plan = RarefactionPlan { target_coverage: target, resamples: rarefaction.resamples, seed };
    let samples = match rarefy_to_coverage_with(labels, &plan, exec) {
        Ok(s) => s,
        Err(StatsError::TargetUnreachable { .. }) => {
            report.flags.push("TargetUnreachable".into());
            return report;
        }
        Err(e) => {
            report.flags.push(format!("RarefactionFailed: {e}"));
            return report;
        }
    };
    let rarefied = rarefied_hsd(&samples).expect("rarefied samples are non-empty");
    report.hsd = rarefied.mean;
    report.hsd_sd = Some(rarefied.sd);
    report.rarefied_to_coverage = Some(target);
    report.resamples = Some(plan.resamples);
    report.seed = Some(seed);
    let ci_seed = seed::sub_seed(seed, u64::MAX);
    if let Ok((lo, hi)) = bootstrap_ci_with(&rarefied.values, bootstrap.resamples, bootstrap.level, ci_seed, exec) {
        let (lo, hi) = if lo <= report.hsd && report.hsd <= hi {
            (lo, hi)
        } else {
            report.flags.push("CiWidened".into());
            (lo.min(report.hsd), hi.max(report.hsd))
        };
        report.ci_low = Some(lo);
        report.ci_high = Some(hi);
    }
    report
}

impl Pipeline {
    pub(super) fn diversity(&self, summary: &mut StageSummary) -> Result<(), PipelineError> {
        let cells = group_cells(io::read_jsonl(&self.path(CLAIMS))?);
        let assigned: HashMap<String, usize> = io::read_jsonl::<ClusterAssignment>(&self.path(CLUSTERS))?
            .into_iter()
            .map(|a| (a.claim_id, a.cluster_id))
            .collect();
        let mut labelled = BTreeMap::new();
        for (key, claims) in cells {
            let labels: Option<Vec<usize>> = claims.iter().map(|c| assigned.get(&c.id).copied()).collect();
            match labels {
                Some(l) => {
                    labelled.insert(key, l);
                }
                None => self.fail(Stage::Diversity, &key, "Unclustered", "cell has claims without a cluster assignment"),
            }
        }
        let reports = diversity_reports(
            &labelled,
            &self.manifest.rarefaction,
            &self.manifest.bootstrap,
            self.root_seed(),
            self.options.exec,
        );
        io::write_jsonl(&self.path(DIVERSITY), &reports)?;
        summary.row("cells", reports.len());
        summary.row("rarefied", reports.iter().filter(|r| r.rarefied_to_coverage.is_some()).count());
        for r in &reports {
            summary.row(
                &format!("{}/{}/{}", r.topic_id, r.generator_id, r.setting),
                format!("hsd {:.3}  coverage {:.3}  n {}", r.hsd, r.coverage, r.n),
            );
        }
        Ok(())
    }
}
