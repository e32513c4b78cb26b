use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    group_cells, CellKey, Pipeline, PipelineError, SharedAppender, Stage, StageSummary, CLAIMS, CLUSTERS, MATCHES,
    REPRESENTATIVENESS, REPRESENT_PROGRESS,
};
use crate::domain::{Claim, ClusterAssignment, DiversityReport, GenerationSetting, MeaningClassTable};
use crate::io::{self, IoError};
use crate::represent::{match_claims, minimal_representativeness_hsd, MatchRecord, ReferenceClaim, RepresentError};

/// One line of `representativeness.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativenessRecord {
    pub language: String,
    /// Model name of the entailment backend that judged the matches.
    pub entailment_backend: String,
    #[serde(flatten)]
    pub report: DiversityReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RepresentProgress {
    #[serde(flatten)]
    cell: CellKey,
    language: String,
    matches: usize,
}

/// Reference sets of one topic, keyed by language (the file stem).
fn load_references(root: &Path, topic_id: &str) -> Result<BTreeMap<String, Vec<ReferenceClaim>>, IoError> {
    let dir = root.join(topic_id);
    let mut out = BTreeMap::new();
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(source) => return Err(IoError::Io { path: dir, source }),
    };
    for entry in entries {
        let path = entry.map_err(|source| IoError::Io { path: dir.clone(), source })?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
            continue;
        }
        let Some(lang) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        out.insert(lang.to_string(), io::read_jsonl(&path)?);
    }
    Ok(out)
}

impl Pipeline {
    pub(super) fn represent(&self, summary: &mut StageSummary) -> Result<(), PipelineError> {
        let Some(root) = &self.manifest.references_dir else {
            return Err(PipelineError::Config("represent needs `references_dir` in the manifest".into()));
        };
        let cells: BTreeMap<CellKey, Vec<Claim>> = group_cells(io::read_jsonl(&self.path(CLAIMS))?)
            .into_iter()
            .filter(|(k, _)| k.setting != GenerationSetting::Rag)
            .collect();
        let assigned: HashMap<String, usize> = io::read_jsonl::<ClusterAssignment>(&self.path(CLUSTERS))?
            .into_iter()
            .map(|a| (a.claim_id, a.cluster_id))
            .collect();
        let done: HashSet<(CellKey, String)> = io::read_jsonl::<RepresentProgress>(&self.path(REPRESENT_PROGRESS))?
            .into_iter()
            .map(|p| (p.cell, p.language))
            .collect();

        let mut references: BTreeMap<String, BTreeMap<String, Vec<ReferenceClaim>>> = BTreeMap::new();
        for topic in &self.manifest.topics {
            references.insert(topic.id.clone(), load_references(root, &topic.id)?);
        }
        let mut jobs = Vec::new();
        for (cell, claims) in &cells {
            for (lang, refs) in references.get(&cell.topic_id).into_iter().flatten() {
                if !done.contains(&(cell.clone(), lang.clone())) {
                    jobs.push((cell, claims, lang, refs));
                }
            }
        }
        summary.row("reference sets", references.values().map(BTreeMap::len).sum::<usize>());
        summary.row("pending (cell, language) pairs", jobs.len());

        let matches_out = SharedAppender::open(&self.path(MATCHES))?;
        let progress_out = SharedAppender::open(&self.path(REPRESENT_PROGRESS))?;
        let top_k = self.manifest.cluster.max_retrieval;
        // Cells run one after another; the matcher parallelizes over references.
        for (cell, claims, lang, refs) in jobs {
            let label = format!("{cell}/{lang}");
            match match_claims(
                refs,
                claims,
                &self.manifest.generation_language,
                self.backends.embedder.as_ref(),
                self.backends.entailer.as_ref(),
                top_k,
                self.options.exec,
            ) {
                Ok(found) => {
                    matches_out.append_all(&found)?;
                    progress_out.append(&RepresentProgress {
                        cell: cell.clone(),
                        language: lang.clone(),
                        matches: found.len(),
                    })?;
                }
                Err(e @ RepresentError::Monolingual { .. }) => self.fail(Stage::Represent, label, "Monolingual", e),
                Err(e) => self.fail(Stage::Represent, label, "Represent", e),
            }
        }
        drop(matches_out);
        drop(progress_out);

        let matches = io::normalize_jsonl(&self.path(MATCHES), |m: &MatchRecord| {
            (m.language.clone(), m.reference_claim_id.clone(), m.generated_claim_id.clone())
        })?;
        let progress = io::normalize_jsonl(&self.path(REPRESENT_PROGRESS), |p: &RepresentProgress| {
            (p.cell.clone(), p.language.clone())
        })?;
        let mut by_claim: HashMap<&str, Vec<&MatchRecord>> = HashMap::new();
        for m in &matches {
            by_claim.entry(m.generated_claim_id.as_str()).or_default().push(m);
        }
        let mut records = Vec::new();
        for p in &progress {
            let Some(claims) = cells.get(&p.cell) else { continue };
            let ids: Vec<&str> = claims.iter().map(|c| c.id.as_str()).collect();
            let labels: Option<Vec<usize>> = ids.iter().map(|id| assigned.get(*id).copied()).collect();
            let Some(labels) = labels else {
                self.fail(Stage::Represent, &p.cell, "Unclustered", "cell has claims without a cluster assignment");
                continue;
            };
            let table = MeaningClassTable::from_labels(&ids, &labels).map_err(|e| PipelineError::Config(e.to_string()))?;
            let cell_matches: Vec<MatchRecord> =
                ids.iter().flat_map(|id| by_claim.get(id).into_iter().flatten().map(|m| (*m).clone())).collect();
            let report = minimal_representativeness_hsd(
                &table,
                &cell_matches,
                &p.language,
                &p.cell.generator_id,
                &p.cell.topic_id,
                p.cell.setting,
            );
            records.push(RepresentativenessRecord {
                language: p.language.clone(),
                entailment_backend: self.manifest.entailment.model_name.clone(),
                report,
            });
        }
        io::write_jsonl(&self.path(REPRESENTATIVENESS), &records)?;
        summary.row("matches total", matches.len());
        summary.row("representativeness rows", records.len());
        Ok(())
    }
}
